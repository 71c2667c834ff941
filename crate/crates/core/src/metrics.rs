//! Voxelwise confusion counts and the derived overlap metrics.

use serde::Serialize;

use crate::volume::{Volume3D, VolumeKind};
use crate::{Error, Result};

/// Dice above this level counts as excellent agreement.
pub const EXCELLENT_DSC: f64 = 0.7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn tally(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Counts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub counts: Counts,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub dsc: f64,
}

/// `num / den`, or `empty` when the denominator vanishes.
fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    /// Metrics from counts. When truth and prediction are both empty,
    /// sensitivity, precision and Dice are 1; when only one side is empty
    /// the affected ratios are 0.
    pub fn from_counts(c: Counts) -> Self {
        let both_empty = c.tp + c.fp + c.fn_ == 0;
        let empty = if both_empty { 1.0 } else { 0.0 };
        EvalReport {
            counts: c,
            accuracy: ratio(c.tp + c.tn, c.total(), 1.0),
            sensitivity: ratio(c.tp, c.tp + c.fn_, empty),
            specificity: ratio(c.tn, c.tn + c.fp, 1.0),
            precision: ratio(c.tp, c.tp + c.fp, empty),
            dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, empty),
        }
    }

    pub fn is_excellent(&self) -> bool {
        self.dsc > EXCELLENT_DSC
    }

    pub const CSV_HEADER: &'static str = "model,accuracy,sensitivity,specificity,precision,dsc";

    /// One CSV row in header order (no trailing newline).
    pub fn csv_row(&self, model: &str) -> String {
        format!(
            "{model},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.accuracy, self.sensitivity, self.specificity, self.precision, self.dsc
        )
    }
}

/// Compares two label volumes voxel by voxel.
pub fn evaluate(pred: &Volume3D, truth: &Volume3D) -> Result<EvalReport> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    for (name, v) in [("prediction", pred), ("truth", truth)] {
        if v.kind() != VolumeKind::Label {
            return Err(Error::InvalidVolume(format!("{name} must be a label volume")));
        }
    }
    Ok(EvalReport::from_counts(Counts::tally(&pred.mask(), &truth.mask())))
}
