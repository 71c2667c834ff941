//! Balanced patch sampling.
//!
//! Each volume is sampled twice per epoch: a dense grid keeps every window
//! that touches the vessel label, then a coarser grid, whose spacing is
//! estimated from the first pass' selection rate, keeps windows with no
//! vessel voxel at all. The grid is shifted by `epoch mod stride_pos` so
//! successive epochs see different windows.

use std::thread;

use crossbeam::channel;
use serde::{Deserialize, Serialize};
use ynet_tensor::rng::SeedRng;

use crate::volume::Volume3D;
use crate::{Error, Result};

/// Edge length of the cubic training window.
pub const DEFAULT_PATCH: usize = 16;
pub const DEFAULT_STRIDE_POS: usize = 20;
pub const DEFAULT_BATCH_CAP: usize = 2048;

/// Stream id mixed with the epoch index for the per-epoch shuffles.
const STREAM_EPOCH: u64 = 3 << 32;

/// One training window cut from an image/label pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    /// Image intensities, x-fastest.
    pub image: Vec<f32>,
    /// Label values in {0, 1}, same layout as `image`.
    pub label: Vec<f32>,
    /// Minimum corner of the window in the source volume.
    pub origin: [usize; 3],
    /// Index of the source volume in the slice handed to the sampler.
    pub source_id: usize,
}

/// Grid parameters shared by every volume of an epoch. The negative stride
/// is derived per volume by [`estimate_negative_stride`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPlan {
    pub stride_pos: usize,
    pub batch_cap: usize,
    pub patch: usize,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            stride_pos: DEFAULT_STRIDE_POS,
            batch_cap: DEFAULT_BATCH_CAP,
            patch: DEFAULT_PATCH,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.stride_pos == 0 || self.batch_cap == 0 || self.patch == 0 {
            return Err(Error::BadConfig(format!(
                "sampling plan needs positive stride, batch cap and patch size, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Grid offset used in a given epoch.
    pub fn offset_for_epoch(&self, epoch: usize) -> usize {
        epoch % self.stride_pos
    }
}

/// Window origins along one axis: `offset + k * stride` while the window
/// fits, plus a final origin at `dim - patch` when the grid misses it.
pub fn axis_origins(dim: usize, patch: usize, stride: usize, offset: usize) -> Vec<usize> {
    if dim < patch || stride == 0 {
        return Vec::new();
    }
    let last = dim - patch;
    let mut out: Vec<usize> = (0..).map(|k| offset + k * stride).take_while(|&o| o <= last).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Cartesian product of [`axis_origins`] per axis, x varying fastest.
pub fn grid_origins(dims: [usize; 3], patch: usize, stride: usize, offset: usize) -> Vec<[usize; 3]> {
    let [xs, ys, zs] = [0, 1, 2].map(|k| axis_origins(dims[k], patch, stride, offset));
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Summed-volume table over the label mask for O(1) window counts.
struct LabelCounts {
    dims: [usize; 3],
    table: Vec<u32>,
}

impl LabelCounts {
    fn new(label: &Volume3D) -> Self {
        let [nx, ny, nz] = label.dims();
        let (sx, sy) = (nx + 1, ny + 1);
        let mut table = vec![0u32; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
        let data = label.data();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = u32::from(data[x + nx * (y + ny * z)] != 0.0);
                    table[at(x + 1, y + 1, z + 1)] = v + table[at(x, y + 1, z + 1)] + table[at(x + 1, y, z + 1)]
                        + table[at(x + 1, y + 1, z)]
                        - table[at(x, y, z + 1)]
                        - table[at(x, y + 1, z)]
                        - table[at(x + 1, y, z)]
                        + table[at(x, y, z)];
                }
            }
        }
        LabelCounts {
            dims: label.dims(),
            table,
        }
    }

    fn window(&self, o: [usize; 3], size: usize) -> u32 {
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let at = |x: usize, y: usize, z: usize| self.table[x + sx * (y + sy * z)];
        let [x0, y0, z0] = o;
        let [x1, y1, z1] = [x0 + size, y0 + size, z0 + size];
        (at(x1, y1, z1) + at(x0, y0, z1) + at(x0, y1, z0) + at(x1, y0, z0))
            - (at(x0, y1, z1) + at(x1, y0, z1) + at(x1, y1, z0) + at(x0, y0, z0))
    }
}

fn check_pair(image: &Volume3D, label: &Volume3D, patch: usize) -> Result<()> {
    if image.dims() != label.dims() {
        return Err(Error::DimMismatch(format!(
            "image {:?} vs label {:?}",
            image.dims(),
            label.dims()
        )));
    }
    if image.dims().iter().any(|&d| d < patch) {
        return Err(Error::VolumeTooSmall {
            dims: image.dims(),
            patch,
        });
    }
    Ok(())
}

fn cut(image: &Volume3D, label: &Volume3D, origin: [usize; 3], patch: usize, source_id: usize) -> PatchRecord {
    let n = patch * patch * patch;
    let mut rec = PatchRecord {
        image: vec![0.0; n],
        label: vec![0.0; n],
        origin,
        source_id,
    };
    image.extract_cube(origin, patch, &mut rec.image);
    label.extract_cube(origin, patch, &mut rec.label);
    for v in &mut rec.label {
        *v = if *v != 0.0 { 1.0 } else { 0.0 };
    }
    rec
}

/// Result of one grid pass: kept windows and how many grid positions were
/// examined.
#[derive(Clone, Debug)]
pub struct GridPass {
    pub patches: Vec<PatchRecord>,
    pub candidates: usize,
}

fn grid_pass(
    image: &Volume3D,
    label: &Volume3D,
    plan: &SamplingPlan,
    stride: usize,
    offset: usize,
    source_id: usize,
    keep: impl Fn(u32) -> bool,
) -> Result<GridPass> {
    check_pair(image, label, plan.patch)?;
    let counts = LabelCounts::new(label);
    let origins = grid_origins(image.dims(), plan.patch, stride, offset);
    let patches = origins
        .iter()
        .filter(|&&o| keep(counts.window(o, plan.patch)))
        .map(|&o| cut(image, label, o, plan.patch, source_id))
        .collect();
    Ok(GridPass {
        patches,
        candidates: origins.len(),
    })
}

/// Windows on the `stride_pos` grid containing at least one labelled voxel.
pub fn extract_positive(
    image: &Volume3D,
    label: &Volume3D,
    plan: &SamplingPlan,
    offset: usize,
    source_id: usize,
) -> Result<GridPass> {
    grid_pass(image, label, plan, plan.stride_pos, offset, source_id, |c| c > 0)
}

/// Windows on a `stride_neg` grid whose label is entirely zero.
pub fn extract_negative(
    image: &Volume3D,
    label: &Volume3D,
    plan: &SamplingPlan,
    stride_neg: usize,
    offset: usize,
    source_id: usize,
) -> Result<GridPass> {
    grid_pass(image, label, plan, stride_neg, offset, source_id, |c| c == 0)
}

/// Coarser stride whose grid yields roughly as many windows as the positive
/// pass kept: `max(s, round(s * (candidates / kept)^(1/3)))`.
pub fn estimate_negative_stride(n_positive_kept: usize, n_grid_candidates: usize, stride_pos: usize) -> Result<usize> {
    if n_positive_kept == 0 {
        return Err(Error::NoPositives);
    }
    let ratio = n_grid_candidates as f64 / n_positive_kept as f64;
    let s = (stride_pos as f64 * ratio.cbrt()).round() as usize;
    Ok(s.max(stride_pos))
}

/// Positive pass followed by the balanced negative pass for one volume, in
/// extraction order. Volumes without any labelled voxel have nothing to
/// balance against, so their negative pass uses `stride_pos`.
pub fn extract_volume(
    image: &Volume3D,
    label: &Volume3D,
    plan: &SamplingPlan,
    offset: usize,
    source_id: usize,
) -> Result<Vec<PatchRecord>> {
    let pos = extract_positive(image, label, plan, offset, source_id)?;
    let stride_neg = match estimate_negative_stride(pos.patches.len(), pos.candidates, plan.stride_pos) {
        Ok(s) => s,
        Err(Error::NoPositives) => plan.stride_pos,
        Err(e) => return Err(e),
    };
    let neg = extract_negative(image, label, plan, stride_neg, offset, source_id)?;
    let mut out = pos.patches;
    out.extend(neg.patches);
    Ok(out)
}

/// An image volume with its binary label.
#[derive(Clone, Copy, Debug)]
pub struct LabeledVolume<'a> {
    pub image: &'a Volume3D,
    pub label: &'a Volume3D,
}

/// How batches travel from the sampler to the consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delivery {
    /// Extraction and consumption alternate on the calling thread.
    Inline,
    /// A producer thread extracts ahead of the consumer through a bounded
    /// queue holding at most `capacity` batches.
    Threaded { capacity: usize },
}

struct EpochSampler<'a> {
    volumes: &'a [LabeledVolume<'a>],
    plan: SamplingPlan,
    offset: usize,
    order: Vec<usize>,
    rng: SeedRng,
}

impl<'a> EpochSampler<'a> {
    fn new(volumes: &'a [LabeledVolume<'a>], epoch: usize, plan: &SamplingPlan, seed: u64) -> Result<Self> {
        plan.validate()?;
        if volumes.is_empty() {
            return Err(Error::InvalidArgument("no training volumes".into()));
        }
        let mut rng = SeedRng::derive(seed, STREAM_EPOCH + epoch as u64);
        let mut order: Vec<usize> = (0..volumes.len()).collect();
        rng.shuffle(&mut order);
        Ok(EpochSampler {
            volumes,
            plan: *plan,
            offset: plan.offset_for_epoch(epoch),
            order,
            rng,
        })
    }

    /// Produces the batches of every volume in epoch order, stopping early
    /// if `emit` returns `false`.
    fn run(mut self, mut emit: impl FnMut(Result<Vec<PatchRecord>>) -> bool) {
        for &id in &self.order {
            let v = self.volumes[id];
            let mut patches = match extract_volume(v.image, v.label, &self.plan, self.offset, id) {
                Ok(p) => p,
                Err(e) => {
                    emit(Err(e));
                    return;
                }
            };
            self.rng.shuffle(&mut patches);
            let mut rest = patches.into_iter().peekable();
            while rest.peek().is_some() {
                let batch: Vec<PatchRecord> = rest.by_ref().take(self.plan.batch_cap).collect();
                if !emit(Ok(batch)) {
                    return;
                }
            }
        }
    }
}

/// Feeds the batches of one epoch to `consume` in a fixed order.
///
/// The volume order is a seeded permutation; within each volume the positive
/// and negative windows are shuffled together and cut into batches of at most
/// `plan.batch_cap`. The sequence depends only on `(volumes, epoch, plan,
/// seed)`, never on the delivery mode. Consumption stops at the first error.
pub fn for_each_batch<F>(
    volumes: &[LabeledVolume<'_>],
    epoch: usize,
    plan: &SamplingPlan,
    seed: u64,
    delivery: Delivery,
    mut consume: F,
) -> Result<()>
where
    F: FnMut(Vec<PatchRecord>) -> Result<()>,
{
    let sampler = EpochSampler::new(volumes, epoch, plan, seed)?;
    match delivery {
        Delivery::Inline => {
            let mut status = Ok(());
            sampler.run(|batch| {
                status = batch.and_then(&mut consume);
                status.is_ok()
            });
            status
        }
        Delivery::Threaded { capacity } => {
            let (tx, rx) = channel::bounded(capacity.max(1));
            thread::scope(|s| {
                s.spawn(move || sampler.run(|batch| tx.send(batch).is_ok()));
                // Dropping the receiver on error unblocks and stops the producer.
                let rx = rx;
                for batch in rx.iter() {
                    consume(batch?)?;
                }
                Ok(())
            })
        }
    }
}

/// Collects one epoch's batches into memory.
pub fn epoch_batches(
    volumes: &[LabeledVolume<'_>],
    epoch: usize,
    plan: &SamplingPlan,
    seed: u64,
    delivery: Delivery,
) -> Result<Vec<Vec<PatchRecord>>> {
    let mut out = Vec::new();
    for_each_batch(volumes, epoch, plan, seed, delivery, |b| {
        out.push(b);
        Ok(())
    })?;
    Ok(out)
}
