//! Classical reference segmenters: a global Renyi-entropy threshold, the
//! Phansalkar local threshold and Frangi multiscale vesselness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::filters::gaussian_filter;
use crate::volume::{Volume3D, VolumeKind};
use crate::{Error, Result};

pub const HIST_BINS: usize = 256;

/// 256-bin histogram over `[0, 1]`; bin `b` covers `[b/256, (b+1)/256)` and
/// the value 1.0 falls in the last bin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram256 {
    pub counts: [u64; HIST_BINS],
    pub total: u64,
}

/// Bin index of a value, clamping out-of-range values to the end bins.
pub fn bin_of(v: f32) -> usize {
    ((f64::from(v) * HIST_BINS as f64).floor().max(0.0) as usize).min(HIST_BINS - 1)
}

impl Histogram256 {
    pub fn from_counts(counts: [u64; HIST_BINS]) -> Self {
        Histogram256 {
            counts,
            total: counts.iter().sum(),
        }
    }

    /// Histogram of `values`, built from per-chunk histograms summed in chunk
    /// order.
    pub fn from_values(values: &[f32]) -> Self {
        let counts = values
            .par_chunks(1 << 16)
            .map(|chunk| {
                let mut c = [0u64; HIST_BINS];
                for &v in chunk {
                    c[bin_of(v)] += 1;
                }
                c
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold([0u64; HIST_BINS], |mut acc, c| {
                for (a, b) in acc.iter_mut().zip(c) {
                    *a += b;
                }
                acc
            });
        Self::from_counts(counts)
    }

    fn nonempty_range(&self) -> Result<(usize, usize)> {
        let first = self.counts.iter().position(|&c| c > 0);
        let last = self.counts.iter().rposition(|&c| c > 0);
        match (first, last) {
            (Some(f), Some(l)) if f < l => Ok((f, l)),
            _ => Err(Error::DegenerateHistogram),
        }
    }

    /// Cumulative probability `P(bin <= t)` for every `t`.
    fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0u64;
        self.counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / self.total as f64
            })
            .collect()
    }
}

/// Renyi entropy of order `alpha` of one class, from raw bin counts and the
/// class total. `alpha == 1` is the Shannon limit.
fn class_entropy(counts: &[u64], class_total: f64, alpha: f64) -> f64 {
    let probs = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / class_total);
    if alpha == 1.0 {
        -probs.map(|p| p * p.ln()).sum::<f64>()
    } else {
        probs.map(|p| p.powf(alpha)).sum::<f64>().ln() / (1.0 - alpha)
    }
}

/// Sum of the two class entropies for the cut "bins <= t | bins > t", or
/// `None` when either class is empty.
pub fn renyi_criterion(h: &Histogram256, t: usize, alpha: f64) -> Option<f64> {
    if t + 1 >= HIST_BINS {
        return None;
    }
    let a: u64 = h.counts[..=t].iter().sum();
    let b = h.total - a;
    if a == 0 || b == 0 {
        return None;
    }
    Some(class_entropy(&h.counts[..=t], a as f64, alpha) + class_entropy(&h.counts[t + 1..], b as f64, alpha))
}

/// Cut maximizing [`renyi_criterion`] for one order. Cuts with equal scores
/// (within a relative 1e-12) form plateaus; the midpoint of the first
/// maximal plateau is returned.
pub fn renyi_single(h: &Histogram256, alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("Renyi order must be positive, got {alpha}")));
    }
    let (first, last) = h.nonempty_range()?;
    let scores: Vec<(usize, f64)> = (first..last)
        .filter_map(|t| renyi_criterion(h, t, alpha).map(|s| (t, s)))
        .collect();
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * best.abs().max(1.0);
    let start = scores.iter().position(|s| s.1 >= best - tol).expect("non-empty scan");
    let run = scores[start..].iter().take_while(|s| s.1 >= best - tol).count();
    Ok((scores[start].0 + scores[start + run - 1].0) / 2)
}

/// Three-order Renyi threshold: the cuts for orders 0.5, 1 and 2 blended
/// with the weighting used by ImageJ's `RenyiEntropy` auto-threshold.
/// Voxels in bins above the returned bin are foreground.
pub fn renyi_threshold(h: &Histogram256) -> Result<usize> {
    let mut t = [renyi_single(h, 0.5)?, renyi_single(h, 1.0)?, renyi_single(h, 2.0)?];
    t.sort_unstable();
    let [t1, t2, t3] = t;
    let close = |a: usize, b: usize| a.abs_diff(b) <= 5;
    let (b1, b2, b3) = match (close(t1, t2), close(t2, t3)) {
        (true, true) => (1.0, 2.0, 1.0),
        (true, false) => (0.0, 1.0, 3.0),
        (false, true) => (3.0, 1.0, 0.0),
        (false, false) => (1.0, 2.0, 1.0),
    };
    let p1 = h.cumulative();
    let omega = p1[t3] - p1[t1];
    let opt = t1 as f64 * (p1[t1] + 0.25 * omega * b1)
        + 0.25 * t2 as f64 * omega * b2
        + t3 as f64 * ((1.0 - p1[t3]) + 0.25 * omega * b3);
    Ok(((opt + 1e-9).floor() as usize).min(HIST_BINS - 1))
}

/// Global Renyi segmentation: foreground where the voxel's bin exceeds the
/// threshold bin.
pub fn renyi_segment(vol: &Volume3D) -> Result<Volume3D> {
    let t = renyi_threshold(&Histogram256::from_values(vol.data()))?;
    let data = vol.data().iter().map(|&v| if bin_of(v) > t { 1.0 } else { 0.0 }).collect();
    vol.with_data(VolumeKind::Label, data)
}

/// Sum over a clamped window `[-r, r]` along one axis of an x-fastest volume.
fn box_sum_axis(data: &[f64], dims: [usize; 3], axis: usize, r: usize) -> Vec<f64> {
    let n = dims[axis];
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; n];
    // Prefix sums over the line padded by `r` replicated samples per side.
    let mut prefix = vec![0.0; n + 2 * r + 1];
    for start in 0..data.len() {
        let coord = (start / stride) % n;
        if coord != 0 {
            continue;
        }
        for (i, l) in line.iter_mut().enumerate() {
            *l = data[start + i * stride];
        }
        for j in 0..n + 2 * r {
            let src = (j as isize - r as isize).clamp(0, n as isize - 1) as usize;
            prefix[j + 1] = prefix[j] + line[src];
        }
        for i in 0..n {
            out[start + i * stride] = prefix[i + 2 * r + 1] - prefix[i];
        }
    }
    out
}

/// Local mean and population standard deviation over a cubic window of
/// `radius` with edge indices clamped (nearest replication).
pub fn local_mean_std(vol: &Volume3D, radius: usize) -> (Vec<f64>, Vec<f64>) {
    let dims = vol.dims();
    let v: Vec<f64> = vol.data().iter().map(|&x| f64::from(x)).collect();
    let sq: Vec<f64> = v.iter().map(|x| x * x).collect();
    let window = |d: &[f64]| (0..3).fold(d.to_vec(), |acc, axis| box_sum_axis(&acc, dims, axis, radius));
    let (s, s2) = rayon::join(|| window(&v), || window(&sq));
    let count = ((2 * radius + 1) as f64).powi(3);
    let mean: Vec<f64> = s.iter().map(|x| x / count).collect();
    let std = s2
        .iter()
        .zip(&mean)
        .map(|(x, m)| (x / count - m * m).max(0.0).sqrt())
        .collect();
    (mean, std)
}

/// Constants of the Phansalkar rule `T = m (1 + p e^{-q m} + k (s / r - 1))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhansalkarParams {
    pub radius: usize,
    pub k: f64,
    pub r: f64,
    pub p: f64,
    pub q: f64,
}

impl Default for PhansalkarParams {
    fn default() -> Self {
        PhansalkarParams {
            radius: 3,
            k: 0.25,
            r: 0.5,
            p: 2.0,
            q: 10.0,
        }
    }
}

impl PhansalkarParams {
    pub fn threshold(&self, mean: f64, std: f64) -> f64 {
        mean * (1.0 + self.p * (-self.q * mean).exp() + self.k * (std / self.r - 1.0))
    }
}

/// Local Phansalkar segmentation: foreground where the value exceeds the
/// threshold computed from its window's mean and standard deviation.
pub fn phansalkar_segment(vol: &Volume3D, params: &PhansalkarParams) -> Result<Volume3D> {
    if params.radius == 0 {
        return Err(Error::InvalidArgument("Phansalkar radius must be >= 1".into()));
    }
    let (mean, std) = local_mean_std(vol, params.radius);
    let data = vol
        .data()
        .iter()
        .zip(mean.iter().zip(&std))
        .map(|(&v, (&m, &s))| if f64::from(v) > params.threshold(m, s) { 1.0 } else { 0.0 })
        .collect();
    vol.with_data(VolumeKind::Label, data)
}

fn sorted_by_magnitude(mut e: [f64; 3]) -> [f64; 3] {
    e.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    e
}

/// Cyclic Jacobi rotations for a symmetric 3x3 matrix.
fn jacobi_eigenvalues(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    for _ in 0..50 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off <= 1e-30 * (a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2)).max(1e-300) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut b = a;
            for k in 0..3 {
                b[k][p] = c * a[k][p] - s * a[k][q];
                b[k][q] = s * a[k][p] + c * a[k][q];
            }
            let mut r = b;
            for k in 0..3 {
                r[p][k] = c * b[p][k] - s * b[q][k];
                r[q][k] = s * b[p][k] + c * b[q][k];
            }
            a = r;
        }
    }
    [a[0][0], a[1][1], a[2][2]]
}

/// Eigenvalues of a symmetric 3x3 matrix, sorted by absolute value. Uses the
/// closed-form trigonometric solution and falls back on Jacobi rotations when
/// all three eigenvalues are nearly coincident. When only two nearly coincide
/// the closed form is accurate to roughly `1e-8` times the matrix norm.
pub fn symmetric_eigenvalues(a: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    if p1 == 0.0 {
        return sorted_by_magnitude([a[0][0], a[1][1], a[2][2]]);
    }
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let scale = a.iter().flatten().map(|x| x * x).sum::<f64>();
    if p2 < 1e-12 * scale {
        return sorted_by_magnitude(jacobi_eigenvalues(a));
    }
    let p = (p2 / 6.0).sqrt();
    let b = |i: usize, j: usize| (a[i][j] - if i == j { q } else { 0.0 }) / p;
    let det_b = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
        + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
    let phi = (det_b / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    sorted_by_magnitude([e1, e2, e3])
}

/// Scale-normalized Hessian components `(xx, yy, zz, xy, xz, yz)` from
/// Gaussian derivative filters at `sigma`.
fn hessian(data: &[f64], dims: [usize; 3], sigma: f64) -> [Vec<f64>; 6] {
    let orders: [[u8; 3]; 6] = [[2, 0, 0], [0, 2, 0], [0, 0, 2], [1, 1, 0], [1, 0, 1], [0, 1, 1]];
    let s2 = sigma * sigma;
    let comps: Vec<Vec<f64>> = orders
        .par_iter()
        .map(|&o| gaussian_filter(data, dims, sigma, o).into_iter().map(|v| v * s2).collect())
        .collect();
    let mut it = comps.into_iter();
    [(); 6].map(|_| it.next().expect("six components"))
}

/// Per-voxel Hessian eigenvalues at one scale as three volumes
/// `(l1, l2, l3)` with `|l1| <= |l2| <= |l3|`.
pub fn hessian_eigenvalues(vol: &Volume3D, sigma: f64) -> Result<[Vec<f64>; 3]> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let data: Vec<f64> = vol.data().iter().map(|&v| f64::from(v)).collect();
    let h = hessian(&data, vol.dims(), sigma);
    let eig: Vec<[f64; 3]> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            symmetric_eigenvalues([
                [h[0][i], h[3][i], h[4][i]],
                [h[3][i], h[1][i], h[5][i]],
                [h[4][i], h[5][i], h[2][i]],
            ])
        })
        .collect();
    Ok([0, 1, 2].map(|k| eig.iter().map(|e| e[k]).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrangiParams {
    /// Gaussian scales in voxels, ascending.
    pub scales: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    /// Structure sensitivity; `None` means half the largest Hessian norm in
    /// the volume at each scale.
    pub c: Option<f64>,
}

impl Default for FrangiParams {
    fn default() -> Self {
        FrangiParams {
            scales: vec![1.0, 2.0, 3.0],
            alpha: 0.5,
            beta: 0.5,
            c: None,
        }
    }
}

impl FrangiParams {
    pub fn validate(&self) -> Result<()> {
        let ok_scales = !self.scales.is_empty()
            && self.scales.iter().all(|&s| s > 0.0 && s.is_finite())
            && self.scales.windows(2).all(|w| w[0] < w[1]);
        if !ok_scales {
            return Err(Error::BadConfig(format!(
                "Frangi scales must be positive and strictly ascending, got {:?}",
                self.scales
            )));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) || self.c.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::BadConfig("Frangi alpha, beta and c must be positive".into()));
        }
        Ok(())
    }
}

/// Bright-tube response for eigenvalues sorted by magnitude. Zero unless
/// both large eigenvalues are negative.
pub fn vesselness(l: [f64; 3], alpha: f64, beta: f64, c: f64) -> f64 {
    let [l1, l2, l3] = l;
    if l2 > 0.0 || l3 > 0.0 {
        return 0.0;
    }
    let s2 = l1 * l1 + l2 * l2 + l3 * l3;
    if s2 == 0.0 || c == 0.0 {
        return 0.0;
    }
    let ra = l2.abs() / l3.abs();
    let rb = if l2 == 0.0 { 0.0 } else { l1.abs() / (l2 * l3).abs().sqrt() };
    (1.0 - (-ra * ra / (2.0 * alpha * alpha)).exp())
        * (-rb * rb / (2.0 * beta * beta)).exp()
        * (1.0 - (-s2 / (2.0 * c * c)).exp())
}

/// Multiscale vesselness: the per-voxel maximum of the single-scale response.
pub fn frangi_vesselness(vol: &Volume3D, params: &FrangiParams) -> Result<Volume3D> {
    params.validate()?;
    let mut best = vec![0.0f64; vol.len()];
    for &sigma in &params.scales {
        let [l1, l2, l3] = hessian_eigenvalues(vol, sigma)?;
        let c = params.c.unwrap_or_else(|| {
            let max_norm = (0..l1.len())
                .map(|i| (l1[i] * l1[i] + l2[i] * l2[i] + l3[i] * l3[i]).sqrt())
                .fold(0.0, f64::max);
            0.5 * max_norm
        });
        best.par_iter_mut().enumerate().for_each(|(i, b)| {
            *b = b.max(vesselness([l1[i], l2[i], l3[i]], params.alpha, params.beta, c));
        });
    }
    let data = best.into_iter().map(|v| (v as f32).clamp(0.0, 1.0)).collect();
    vol.with_data(VolumeKind::Probability, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Renyi,
    Phansalkar,
    Frangi,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Renyi, Baseline::Phansalkar, Baseline::Frangi];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Renyi => "renyi",
            Baseline::Phansalkar => "phansalkar",
            Baseline::Frangi => "frangi",
        }
    }
}

/// Settings shared by the baseline runners.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    pub phansalkar: PhansalkarParams,
    pub frangi: FrangiParams,
}

/// Label volume from one baseline. Frangi is binarized with
/// `frangi_threshold` (`p >= t`), normally calibrated on validation data.
pub fn run_baseline(vol: &Volume3D, which: Baseline, params: &BaselineParams, frangi_threshold: f64) -> Result<Volume3D> {
    match which {
        Baseline::Renyi => renyi_segment(vol),
        Baseline::Phansalkar => phansalkar_segment(vol, &params.phansalkar),
        Baseline::Frangi => crate::predict::binarize(&frangi_vesselness(vol, &params.frangi)?, frangi_threshold),
    }
}
