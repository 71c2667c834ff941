//! Minimal 5-axis tensor engine for volumetric encoder/decoder networks.
//!
//! Tensors are laid out `(n, c, d, h, w)` with `w` varying fastest. Every
//! differentiable op comes as a forward/backward pair; there is no graph or
//! tape, callers chain backward passes themselves.
//!
//! All kernels are generic over [`Scalar`] so the same code runs in `f32`
//! for training and `f64` for finite-difference checks.

mod activation;
mod adam;
mod conv;
mod error;
mod init;
mod loss;
mod pool;
pub mod rng;
mod scalar;
mod tensor;

pub use activation::{activation, activation_backward, Activation};
pub use adam::{AdamHyper, AdamState};
pub use conv::{
    conv3d, conv3d_backward, conv3d_strided, conv3d_strided_backward, conv_transpose3d,
    conv_transpose3d_backward, ConvParams, KERNEL_TAPS,
};
pub use error::TensorError;
pub use init::{normal_init, xavier_bound, xavier_init};
pub use loss::{bce_loss, bce_loss_backward, BCE_EPS};
pub use pool::{
    concat_channels, maxpool3d, maxpool3d_backward, split_channels, upsample3, upsample3_backward,
    PoolIndices,
};
pub use scalar::Scalar;
pub use tensor::{Shape5, Tensor5};

pub type Result<T> = std::result::Result<T, TensorError>;
