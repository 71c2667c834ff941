//! Training loop: patch epochs, Adam updates, periodic validation and
//! best-checkpoint retention.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use ynet_tensor::{bce_loss, bce_loss_backward, AdamHyper, AdamState, Shape5, Tensor5};

use crate::model::{patch_center, YNetModel};
use crate::patches::{extract_volume, for_each_batch, Delivery, LabeledVolume, PatchRecord, SamplingPlan};
use crate::{Error, Result};

/// Patches per forward pass when only the loss is needed.
const EVAL_CHUNK: usize = 64;

/// Epoch budget, validation cadence and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Total epochs; `None` means `30 * stride_pos`.
    pub epochs: Option<usize>,
    pub validate_every: usize,
    /// Stop after this many consecutive validation checks without
    /// improvement; `None` disables early stopping.
    pub patience: Option<usize>,
    /// Patches per Adam step.
    pub minibatch: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        let adam = AdamHyper::default();
        TrainSchedule {
            epochs: None,
            validate_every: 5,
            patience: Some(10),
            minibatch: 32,
            seed: 7,
            learning_rate: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
        }
    }
}

impl TrainSchedule {
    pub fn total_epochs(&self, plan: &SamplingPlan) -> usize {
        self.epochs.unwrap_or(30 * plan.stride_pos)
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    /// Validation runs on epochs divisible by `validate_every` and on the
    /// last epoch (0-based).
    pub fn validates_at(&self, epoch: usize, total: usize) -> bool {
        epoch % self.validate_every == 0 || epoch + 1 == total
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(format!("train schedule: {m}")));
        if self.epochs == Some(0) {
            return bad("epochs must be positive");
        }
        if self.validate_every == 0 {
            return bad("validate_every must be positive");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        if self.minibatch == 0 {
            return bad("minibatch must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-voxel training BCE over the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,seconds";

    /// One CSV line for an epoch (no trailing newline).
    pub fn csv_row(r: &EpochRecord) -> String {
        let val = r.val_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
        format!("{},{:.9},{},{:.3}", r.epoch, r.train_loss, val, r.seconds)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            out.push_str(&Self::csv_row(r));
            out.push('\n');
        }
        out
    }

    pub fn validation_points(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.epochs.iter().filter_map(|r| r.val_loss.map(|v| (r.epoch, v)))
    }
}

/// Stacks patches into an image batch, a label batch and their centres.
pub fn assemble_batch(
    records: &[&PatchRecord],
    volumes: &[LabeledVolume<'_>],
    patch: usize,
) -> Result<(Tensor5<f32>, Tensor5<f32>, Vec<[f64; 3]>)> {
    let shape = Shape5::new(records.len(), 1, patch, patch, patch);
    let mut image = Vec::with_capacity(shape.len());
    let mut label = Vec::with_capacity(shape.len());
    let mut centers = Vec::with_capacity(records.len());
    for r in records {
        let dims = volumes
            .get(r.source_id)
            .ok_or_else(|| Error::InvalidArgument(format!("patch from unknown volume {}", r.source_id)))?
            .image
            .dims();
        image.extend_from_slice(&r.image);
        label.extend_from_slice(&r.label);
        centers.push(patch_center(r.origin, dims, patch)?);
    }
    Ok((Tensor5::from_vec(shape, image)?, Tensor5::from_vec(shape, label)?, centers))
}

/// Sum of per-voxel BCE over `records` (not yet divided by the voxel count).
fn summed_loss(model: &YNetModel<f32>, records: &[&PatchRecord], volumes: &[LabeledVolume<'_>]) -> Result<f64> {
    let patch = model.config().patch_size;
    let mut total = 0.0;
    for chunk in records.chunks(EVAL_CHUNK) {
        let (x, y, centers) = assemble_batch(chunk, volumes, patch)?;
        let out = model.forward(&x, &centers)?;
        total += bce_loss(&out, &y)? * out.len() as f64;
    }
    Ok(total)
}

/// Mean per-voxel BCE of `model` on `records`.
pub fn mean_loss(model: &YNetModel<f32>, records: &[&PatchRecord], volumes: &[LabeledVolume<'_>]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no patches to evaluate".into()));
    }
    let voxels = records.len() * model.config().patch_size.pow(3);
    Ok(summed_loss(model, records, volumes)? / voxels as f64)
}

/// Mean per-voxel BCE over every patch the sampler extracts from the
/// validation volumes at offset 0.
pub fn validation_loss(model: &YNetModel<f32>, val: &[LabeledVolume<'_>], plan: &SamplingPlan) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("no validation volumes".into()));
    }
    let plan = SamplingPlan {
        patch: model.config().patch_size,
        ..*plan
    };
    let mut total = 0.0;
    let mut voxels = 0usize;
    for (id, v) in val.iter().enumerate() {
        let patches = extract_volume(v.image, v.label, &plan, 0, id)?;
        let refs: Vec<&PatchRecord> = patches.iter().collect();
        total += summed_loss(model, &refs, val)?;
        voxels += patches.len() * plan.patch.pow(3);
    }
    if voxels == 0 {
        return Err(Error::InvalidArgument("validation volumes yield no patches".into()));
    }
    Ok(total / voxels as f64)
}

/// One Adam step on a minibatch; returns the minibatch mean BCE.
pub fn train_step(
    model: &mut YNetModel<f32>,
    adam: &mut AdamState<f32>,
    records: &[&PatchRecord],
    volumes: &[LabeledVolume<'_>],
) -> Result<f64> {
    let (x, y, centers) = assemble_batch(records, volumes, model.config().patch_size)?;
    let (out, cache) = model.forward_train(&x, &centers)?;
    let loss = bce_loss(&out, &y)?;
    let grad_out = bce_loss_backward(&out, &y)?;
    let grads = model.backward(&cache, &grad_out)?;
    let flat: Vec<&[f32]> = grads.iter().flat_map(|p| [&p.weight[..], &p.bias[..]]).collect();
    adam.update(&mut model.param_slices_mut(), &flat)?;
    Ok(loss)
}

/// Runs the schedule and returns the parameters with the lowest validation
/// loss together with the log. `on_epoch` sees each record as it completes.
pub fn train(
    model: YNetModel<f32>,
    train_set: &[LabeledVolume<'_>],
    val_set: &[LabeledVolume<'_>],
    schedule: &TrainSchedule,
    plan: &SamplingPlan,
    delivery: Delivery,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(YNetModel<f32>, TrainLog)> {
    schedule.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let plan = SamplingPlan {
        patch: model.config().patch_size,
        ..*plan
    };
    plan.validate()?;
    let total = schedule.total_epochs(&plan);
    let mut model = model;
    let mut adam = AdamState::new(schedule.adam(), model.param_sizes());
    let mut best = model.clone();
    let mut log = TrainLog::default();
    let mut stale_checks = 0;

    for epoch in 0..total {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut patches = 0usize;
        for_each_batch(train_set, epoch, &plan, schedule.seed, delivery, |batch| {
            let refs: Vec<&PatchRecord> = batch.iter().collect();
            for mb in refs.chunks(schedule.minibatch) {
                let loss = train_step(&mut model, &mut adam, mb, train_set)?;
                if !loss.is_finite() {
                    return Err(Error::DivergedLoss { epoch, loss });
                }
                loss_sum += loss * mb.len() as f64;
                patches += mb.len();
            }
            Ok(())
        })?;
        let train_loss = if patches == 0 { 0.0 } else { loss_sum / patches as f64 };
        let val_loss = if schedule.validates_at(epoch, total) {
            let v = validation_loss(&model, val_set, &plan)?;
            if !v.is_finite() {
                return Err(Error::DivergedLoss { epoch, loss: v });
            }
            if log.best_val_loss.is_none_or(|b| v < b) {
                log.best_val_loss = Some(v);
                log.best_epoch = Some(epoch);
                best = model.clone();
                stale_checks = 0;
            } else {
                stale_checks += 1;
            }
            Some(v)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
        if schedule.patience.is_some_and(|p| stale_checks >= p) && epoch + 1 < total {
            log.stopped_early = true;
            break;
        }
    }
    Ok((best, log))
}
