//! Whole-volume inference by overlapping tiles, threshold calibration,
//! binarization and binary morphology.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ynet_tensor::{Shape5, Tensor5};

use crate::metrics::{Counts, EvalReport};
use crate::model::{patch_center, Morphology, YNetModel};
use crate::patches::axis_origins;
use crate::volume::{Volume3D, VolumeKind};
use crate::{Error, Result};

/// Patches per forward pass during inference.
const PREDICT_CHUNK: usize = 32;

/// Anything that maps a batch of patches to per-voxel probabilities.
pub trait PatchModel: Sync {
    fn patch_size(&self) -> usize;

    /// `batch` is `(B, 1, p, p, p)`; returns the same shape with values in
    /// `[0, 1]`. `centers` are the normalized patch centres.
    fn predict_batch(&self, batch: &Tensor5<f32>, centers: &[[f64; 3]]) -> Result<Tensor5<f32>>;
}

impl PatchModel for YNetModel<f32> {
    fn patch_size(&self) -> usize {
        self.config().patch_size
    }

    fn predict_batch(&self, batch: &Tensor5<f32>, centers: &[[f64; 3]]) -> Result<Tensor5<f32>> {
        self.forward(batch, centers)
    }
}

/// Origins of the inference tiling: a grid with half-patch spacing per axis
/// (8 for 16-voxel patches) plus a final origin at `dim - patch`.
pub fn tile_origins(dims: [usize; 3], patch: usize) -> Result<Vec<[usize; 3]>> {
    if dims.iter().any(|&d| d < patch) {
        return Err(Error::VolumeTooSmall { dims, patch });
    }
    let stride = (patch / 2).max(1);
    let [xs, ys, zs] = [0, 1, 2].map(|k| axis_origins(dims[k], patch, stride, 0));
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Number of tiles covering each voxel.
pub fn coverage_map(dims: [usize; 3], patch: usize) -> Result<Vec<u32>> {
    let mut cov = vec![0u32; dims.iter().product()];
    for o in tile_origins(dims, patch)? {
        for_each_voxel(dims, o, patch, |i, _| cov[i] += 1);
    }
    Ok(cov)
}

fn for_each_voxel(dims: [usize; 3], o: [usize; 3], patch: usize, mut f: impl FnMut(usize, usize)) {
    let mut k = 0;
    for z in o[2]..o[2] + patch {
        for y in o[1]..o[1] + patch {
            let row = dims[0] * (y + dims[1] * z);
            for x in o[0]..o[0] + patch {
                f(row + x, k);
                k += 1;
            }
        }
    }
}

/// Raw tile sums before averaging, useful for checking conservation.
pub struct Assembly {
    pub sum: Vec<f64>,
    pub coverage: Vec<u32>,
    /// Sum of every value of every predicted tile.
    pub tile_total: f64,
}

/// Predicts every tile and accumulates the outputs per voxel. Chunks of
/// tiles run in parallel; the merge is sequential in tile order so the
/// result does not depend on the thread count.
pub fn assemble(model: &dyn PatchModel, vol: &Volume3D) -> Result<Assembly> {
    let dims = vol.dims();
    let patch = model.patch_size();
    let origins = tile_origins(dims, patch)?;
    let n = patch * patch * patch;
    let outputs: Vec<Vec<f32>> = origins
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let shape = Shape5::new(chunk.len(), 1, patch, patch, patch);
            let mut data = vec![0.0f32; shape.len()];
            let mut centers = Vec::with_capacity(chunk.len());
            for (i, &o) in chunk.iter().enumerate() {
                vol.extract_cube(o, patch, &mut data[i * n..(i + 1) * n]);
                centers.push(patch_center(o, dims, patch)?);
            }
            let out = model.predict_batch(&Tensor5::from_vec(shape, data)?, &centers)?;
            if out.shape() != shape {
                return Err(Error::InvalidArgument(format!(
                    "model returned {} for a {} batch",
                    out.shape(),
                    shape
                )));
            }
            Ok(out.into_vec())
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0f64; vol.len()];
    let mut coverage = vec![0u32; vol.len()];
    let mut tile_total = 0.0;
    for (chunk, out) in origins.chunks(PREDICT_CHUNK).zip(&outputs) {
        for (i, &o) in chunk.iter().enumerate() {
            let tile = &out[i * n..(i + 1) * n];
            for_each_voxel(dims, o, patch, |v, k| {
                sum[v] += f64::from(tile[k]);
                coverage[v] += 1;
            });
            tile_total += tile.iter().map(|&t| f64::from(t)).sum::<f64>();
        }
    }
    Ok(Assembly {
        sum,
        coverage,
        tile_total,
    })
}

/// Probability volume from overlapping tiles, averaged per voxel.
pub fn predict_volume(model: &dyn PatchModel, vol: &Volume3D) -> Result<Volume3D> {
    let a = assemble(model, vol)?;
    let data = a
        .sum
        .iter()
        .zip(&a.coverage)
        .map(|(&s, &c)| ((s / f64::from(c)) as f32).clamp(0.0, 1.0))
        .collect();
    vol.with_data(VolumeKind::Probability, data)
}

/// Label volume with 1 where `p >= t`.
pub fn binarize(p: &Volume3D, t: f64) -> Result<Volume3D> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside [0, 1]")));
    }
    let data = p.data().iter().map(|&v| if f64::from(v) >= t { 1.0 } else { 0.0 }).collect();
    p.with_data(VolumeKind::Label, data)
}

/// What the threshold scan maximizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationObjective {
    #[default]
    Accuracy,
    Dice,
}

/// Thresholds `0, 0.01, ..., 1`.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

/// Picks the grid threshold maximizing the mean per-volume objective over
/// `(probability, truth)` pairs; ties go to the smaller threshold.
pub fn calibrate_threshold(pairs: &[(&Volume3D, &Volume3D)], objective: CalibrationObjective) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no validation pairs for calibration".into()));
    }
    for (p, t) in pairs {
        if p.dims() != t.dims() {
            return Err(Error::DimMismatch(format!("{:?} vs {:?}", p.dims(), t.dims())));
        }
    }
    let grid: Vec<f64> = threshold_grid().collect();
    let mut scores = vec![0.0f64; grid.len()];
    for (p, truth) in pairs {
        let counts = sweep_counts(p.data(), truth.data(), &grid);
        for (s, c) in scores.iter_mut().zip(&counts) {
            let r = EvalReport::from_counts(*c);
            *s += match objective {
                CalibrationObjective::Accuracy => r.accuracy,
                CalibrationObjective::Dice => r.dsc,
            };
        }
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(grid[best])
}

/// Confusion counts of `p >= t` against `truth` for each threshold in the
/// ascending `grid`, computed from one sort of the probabilities.
fn sweep_counts(p: &[f32], truth: &[f32], grid: &[f64]) -> Vec<Counts> {
    let mut pairs: Vec<(f64, bool)> = p.iter().zip(truth).map(|(&v, &t)| (f64::from(v), t != 0.0)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = pairs.iter().filter(|x| x.1).count() as u64;
    let negatives = pairs.len() as u64 - positives;
    // Walk the sorted values once; everything before `i` is predicted 0.
    let mut i = 0;
    let (mut fn_, mut tn) = (0u64, 0u64);
    grid.iter()
        .map(|&t| {
            while i < pairs.len() && pairs[i].0 < t {
                if pairs[i].1 {
                    fn_ += 1;
                } else {
                    tn += 1;
                }
                i += 1;
            }
            Counts {
                tp: positives - fn_,
                fp: negatives - tn,
                fn_,
                tn,
            }
        })
        .collect()
}

fn neighbors(dims: [usize; 3], i: usize, mut f: impl FnMut(usize)) {
    let [nx, ny, nz] = dims;
    let x = i % nx;
    let y = (i / nx) % ny;
    let z = i / (nx * ny);
    if x > 0 {
        f(i - 1);
    }
    if x + 1 < nx {
        f(i + 1);
    }
    if y > 0 {
        f(i - nx);
    }
    if y + 1 < ny {
        f(i + nx);
    }
    if z > 0 {
        f(i - nx * ny);
    }
    if z + 1 < nz {
        f(i + nx * ny);
    }
}

/// Dilation with the 6-connected cross; voxels outside the volume count as 0.
pub fn dilate(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    (0..mask.len())
        .map(|i| {
            let mut v = mask[i];
            neighbors(dims, i, |j| v |= mask[j]);
            v
        })
        .collect()
}

/// Erosion with the 6-connected cross; voxels outside the volume count as 0.
pub fn erode(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    (0..mask.len())
        .map(|i| {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let interior = x > 0 && y > 0 && z > 0 && x + 1 < nx && y + 1 < ny && z + 1 < nz;
            let mut v = mask[i] && interior;
            if v {
                neighbors(dims, i, |j| v &= mask[j]);
            }
            v
        })
        .collect()
}

fn pad(mask: &[bool], dims: [usize; 3]) -> (Vec<bool>, [usize; 3]) {
    let p = dims.map(|d| d + 2);
    let mut out = vec![false; p.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out[(x + 1) + p[0] * ((y + 1) + p[1] * (z + 1))] = mask[x + dims[0] * (y + dims[1] * z)];
            }
        }
    }
    (out, p)
}

fn crop(padded: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let p = dims.map(|d| d + 2);
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.push(padded[(x + 1) + p[0] * ((y + 1) + p[1] * (z + 1))]);
            }
        }
    }
    out
}

/// Closing (dilate then erode) or opening (erode then dilate) of a label
/// volume, treating everything outside the volume as background. Closing
/// works on a one-voxel padded copy so growth past the edge is not lost
/// before the erosion.
pub fn morphology(lbl: &Volume3D, op: Morphology) -> Result<Volume3D> {
    if lbl.kind() != VolumeKind::Label {
        return Err(Error::InvalidVolume("morphology needs a label volume".into()));
    }
    let dims = lbl.dims();
    let mask = lbl.mask();
    let out = match op {
        Morphology::None => mask,
        Morphology::Closing => {
            let (padded, pdims) = pad(&mask, dims);
            crop(&erode(&dilate(&padded, pdims), pdims), dims)
        }
        Morphology::Opening => dilate(&erode(&mask, dims), dims),
    };
    Volume3D::from_mask(dims, lbl.spacing(), &out)
}
