//! Separable Gaussian filtering with clamped (nearest) edges.
//!
//! Kernels are truncated at `ceil(4 sigma)`. The smoothing kernel is
//! normalized to unit sum; derivative kernels are built from it so that
//! first-derivative taps are odd and second-derivative taps sum to zero,
//! which makes both return exactly 0 on constant input.

/// One-dimensional Gaussian kernel taps for offsets `-r..=r`.
#[derive(Clone, Debug)]
pub struct GaussianKernel {
    pub radius: usize,
    pub taps: Vec<f64>,
    pub order: u8,
}

impl GaussianKernel {
    pub fn new(sigma: f64, order: u8) -> Self {
        assert!(sigma > 0.0 && order <= 2);
        let radius = (4.0 * sigma).ceil().max(1.0) as usize;
        let r = radius as isize;
        let g: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = g.iter().sum();
        let s2 = sigma * sigma;
        let taps = (-r..=r)
            .zip(&g)
            .map(|(k, &gk)| {
                let k = k as f64;
                let gk = gk / norm;
                match order {
                    0 => gk,
                    1 => -k / s2 * gk,
                    _ => (k * k / (s2 * s2) - 1.0 / s2) * gk,
                }
            })
            .collect();
        GaussianKernel { radius, taps, order }
    }

    #[inline]
    fn tap(&self, k: usize) -> f64 {
        self.taps[self.radius + k]
    }

    /// Convolves one line `src` (stride 1) into `dst`.
    fn apply_line(&self, src: &[f64], dst: &mut [f64]) {
        let n = src.len() as isize;
        let at = |i: isize| src[i.clamp(0, n - 1) as usize];
        for (i, out) in dst.iter_mut().enumerate() {
            let i = i as isize;
            let c = src[i as usize];
            let mut acc = 0.0;
            match self.order {
                0 => {
                    acc = self.tap(0) * c;
                    for k in 1..=self.radius {
                        acc += self.tap(k) * (at(i - k as isize) + at(i + k as isize));
                    }
                }
                1 => {
                    // conv: sum_k f(i-k) g'(k), g' odd
                    for k in 1..=self.radius {
                        acc += self.tap(k) * (at(i - k as isize) - at(i + k as isize));
                    }
                }
                _ => {
                    // zero-sum form: centre tap is -2 * sum of the others
                    for k in 1..=self.radius {
                        acc += self.tap(k) * (at(i - k as isize) + at(i + k as isize) - 2.0 * c);
                    }
                }
            }
            *out = acc;
        }
    }
}

/// Filters `data` (x-fastest, `dims = [nx, ny, nz]`) along `axis` (0 = x).
pub fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &GaussianKernel) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut out = vec![0.0; data.len()];
    let len = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let mut line = vec![0.0; len];
    let mut res = vec![0.0; len];
    let (outer_a, outer_b) = match axis {
        0 => (ny, nz),
        1 => (nx, nz),
        _ => (nx, ny),
    };
    for b in 0..outer_b {
        for a in 0..outer_a {
            let base = match axis {
                0 => b * nx * ny + a * nx,
                1 => b * nx * ny + a,
                _ => b * nx + a,
            };
            for (i, l) in line.iter_mut().enumerate() {
                *l = data[base + i * stride];
            }
            kernel.apply_line(&line, &mut res);
            for (i, &r) in res.iter().enumerate() {
                out[base + i * stride] = r;
            }
        }
    }
    out
}

/// Separable filter with per-axis derivative orders `[ox, oy, oz]`.
pub fn gaussian_filter(data: &[f64], dims: [usize; 3], sigma: f64, orders: [u8; 3]) -> Vec<f64> {
    let mut cur = convolve_axis(data, dims, 0, &GaussianKernel::new(sigma, orders[0]));
    cur = convolve_axis(&cur, dims, 1, &GaussianKernel::new(sigma, orders[1]));
    convolve_axis(&cur, dims, 2, &GaussianKernel::new(sigma, orders[2]))
}
