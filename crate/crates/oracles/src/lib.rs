//! Brute-force reference implementations for tests.
//!
//! Everything here works on plain `f64` slices with the most direct loop
//! structure possible and shares no code with the crates under test.

/// Direct-summation 3x3x3 convolution, zero padding 1, given stride.
/// `x` is `(n, c_in, d, h, w)`, `w` is `(c_out, c_in, 3, 3, 3)`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    x: &[f64],
    n: usize,
    c_in: usize,
    dims: [usize; 3],
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    stride: usize,
) -> (Vec<f64>, [usize; 3]) {
    let [d, h, w] = dims;
    let od = (d - 1) / stride + 1;
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let mut out = vec![0.0; n * c_out * od * oh * ow];
    for b in 0..n {
        for o in 0..c_out {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias[o];
                        for i in 0..c_in {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iz = (z * stride + kz) as isize - 1;
                                        let iy = (y * stride + ky) as isize - 1;
                                        let ix = (xx * stride + kx) as isize - 1;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        let xi = (((b * c_in + i) * d + iz as usize) * h
                                            + iy as usize)
                                            * w
                                            + ix as usize;
                                        let wi = (o * c_in + i) * 27 + kz * 9 + ky * 3 + kx;
                                        acc += weight[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        out[(((b * c_out + o) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [od, oh, ow])
}

/// 2x2x2 window max over `(n*c)` planes of `dims`.
pub fn maxpool(x: &[f64], planes: usize, dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut out = Vec::new();
    for p in 0..planes {
        for z in 0..d / 2 {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((p * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                m = m.max(x[i]);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest relative error `|a-b| / max(|a|, |b|, floor)` across two vectors.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Mean and population std over a cubic window of `radius`, indices clamped
/// to the volume (x-fastest layout).
pub fn window_mean_std(v: &[f64], dims: [usize; 3], radius: usize) -> (Vec<f64>, Vec<f64>) {
    let [nx, ny, nz] = dims;
    let r = radius as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut means = Vec::with_capacity(v.len());
    let mut stds = Vec::with_capacity(v.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut vals = Vec::new();
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let xi = clamp(x as isize + dx, nx);
                            let yi = clamp(y as isize + dy, ny);
                            let zi = clamp(z as isize + dz, nz);
                            vals.push(v[(zi * ny + yi) * nx + xi]);
                        }
                    }
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
                means.push(m);
                stds.push(var.sqrt());
            }
        }
    }
    (means, stds)
}

/// Renyi criterion `H_A + H_B` for the cut "bins <= t | bins > t";
/// `alpha == 1` is the Shannon limit. `None` when a class is empty.
pub fn renyi_criterion(hist: &[u64], t: usize, alpha: f64) -> Option<f64> {
    let total: u64 = hist.iter().sum();
    let p: Vec<f64> = hist.iter().map(|&c| c as f64 / total as f64).collect();
    let wa: f64 = p[..=t].iter().sum();
    let wb: f64 = p[t + 1..].iter().sum();
    if wa <= 0.0 || wb <= 0.0 {
        return None;
    }
    let class = |ps: &[f64], w: f64| -> f64 {
        if (alpha - 1.0).abs() < 1e-12 {
            -ps.iter()
                .filter(|&&q| q > 0.0)
                .map(|&q| (q / w) * (q / w).ln())
                .sum::<f64>()
        } else {
            let s: f64 = ps.iter().filter(|&&q| q > 0.0).map(|&q| (q / w).powf(alpha)).sum();
            s.ln() / (1.0 - alpha)
        }
    };
    Some(class(&p[..=t], wa) + class(&p[t + 1..], wb))
}

/// All cuts attaining the maximum criterion (within `tol`) by exhaustive scan.
pub fn renyi_argmax_set(hist: &[u64], alpha: f64, tol: f64) -> Vec<usize> {
    let scores: Vec<(usize, f64)> = (0..hist.len() - 1)
        .filter_map(|t| renyi_criterion(hist, t, alpha).map(|s| (t, s)))
        .collect();
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    scores
        .into_iter()
        .filter(|s| s.1 >= best - tol)
        .map(|s| s.0)
        .collect()
}

/// Per-voxel count of tiles covering each voxel along one axis product.
pub fn coverage(dims: [usize; 3], origins: &[[usize; 3]], patch: usize) -> Vec<u32> {
    let [nx, ny, nz] = dims;
    let mut cov = vec![0u32; nx * ny * nz];
    for o in origins {
        for z in o[2]..o[2] + patch {
            for y in o[1]..o[1] + patch {
                for x in o[0]..o[0] + patch {
                    cov[(z * ny + y) * nx + x] += 1;
                }
            }
        }
    }
    cov
}

/// Confusion counts `(tp, fp, fn, tn)` by direct tally.
pub fn tally(pred: &[bool], truth: &[bool]) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => c.3 += 1,
        }
    }
    c
}

/// Threshold in `{0, 0.01, ..., 1}` maximizing mean accuracy of `p >= t`
/// over volumes; earliest maximum wins.
pub fn best_grid_threshold(vols: &[(Vec<f64>, Vec<bool>)]) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..=100 {
        let t = k as f64 / 100.0;
        let acc: f64 = vols
            .iter()
            .map(|(p, l)| {
                let correct = p.iter().zip(l).filter(|(&pi, &li)| (pi >= t) == li).count();
                correct as f64 / p.len() as f64
            })
            .sum::<f64>()
            / vols.len() as f64;
        if acc > best.0 {
            best = (acc, t);
        }
    }
    best.1
}

/// Distance from `p` to segment `a-b` and the clamped parameter along it.
pub fn point_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> (f64, f64) {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let u = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + u * ab[0], a[1] + u * ab[1], a[2] + u * ab[2]];
    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    (d, u)
}

/// Real roots of the characteristic polynomial of a symmetric 3x3 matrix,
/// found by bisection on sign changes of `det(A - x I)` over Gershgorin bounds.
pub fn symmetric_eigenvalues(a: [[f64; 3]; 3]) -> [f64; 3] {
    let det = |x: f64| {
        let m = [
            [a[0][0] - x, a[0][1], a[0][2]],
            [a[1][0], a[1][1] - x, a[1][2]],
            [a[2][0], a[2][1], a[2][2] - x],
        ];
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let radius = (0..3)
        .map(|i| a[i][i].abs() + (0..3).filter(|&j| j != i).map(|j| a[i][j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + 1.0;
    // Dense scan for brackets, then bisection. Near-double roots are caught by
    // scanning the derivative sign as well.
    let steps = 20_000;
    let h = 2.0 * radius / steps as f64;
    let mut roots = Vec::new();
    let mut prev = det(-radius);
    for s in 1..=steps {
        let x = -radius + s as f64 * h;
        let cur = det(x);
        if prev == 0.0 {
            roots.push(x - h);
        } else if prev.signum() != cur.signum() {
            let (mut lo, mut hi) = (x - h, x);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if det(mid).signum() == det(lo).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev = cur;
    }
    // Fall back on trace/determinant identities when a double root hid a bracket.
    let tr = a[0][0] + a[1][1] + a[2][2];
    while roots.len() < 3 {
        if roots.len() == 2 {
            roots.push(tr - roots[0] - roots[1]);
        } else if roots.len() == 1 {
            let r = roots[0];
            let rest = (tr - r) / 2.0;
            roots.push(rest);
            roots.push(rest);
        } else {
            roots.extend([tr / 3.0; 3]);
        }
    }
    roots.truncate(3);
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    [roots[0], roots[1], roots[2]]
}
