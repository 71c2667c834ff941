//! Patch-based 3D vessel segmentation with a convolutional autoencoder that
//! takes the patch position as a third input path ("Y-net"), together with
//! the classical baselines and evaluation it is compared against.

pub mod baselines;
mod error;
pub mod filters;
pub mod metrics;
pub mod model;
pub mod patches;
pub mod phantom;
pub mod predict;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
