use std::time::Instant;
use ynet_tensor::*;
fn main() {
    for &(cin, cout, d, n) in &[(48usize, 16usize, 16usize, 32usize), (16, 16, 16, 32), (96, 32, 8, 32), (1, 16, 16, 32)] {
        let x = Tensor5::<f32>::filled(Shape5::new(n, cin, d, d, d), 0.3);
        let mut p = ConvParams::<f32>::zeros(cin, cout);
        p.weight.iter_mut().enumerate().for_each(|(i, w)| *w = (i % 7) as f32 * 0.01);
        let t = Instant::now();
        let y = conv3d(&x, &p).unwrap();
        let f = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let _ = conv3d_backward(&x, &p, &y).unwrap();
        let b = t.elapsed().as_secs_f64();
        let macs = (cin * cout * 27 * d * d * d * n) as f64;
        println!("{cin}->{cout} @{d}^3 x{n}: fwd {:.3}s ({:.1} GMAC/s) bwd {:.3}s ({:.1} GMAC/s)", f, macs / f / 1e9, b, 2.0 * macs / b / 1e9);
    }
}
