//! Dense tensors, the reverse-mode tape, and the 3D convolution primitives.
//!
//! Values are stored as `f64`. Under [`Precision::Single`] every recorded
//! forward value is rounded through `f32` after the op has accumulated in
//! double precision, which emulates single-precision storage while keeping the
//! higher-precision accumulation path. Gradients are always carried in `f64`.

mod batchnorm;
mod conv;
mod dense;
mod gradcheck;
mod ops;
mod tape;

pub use batchnorm::{BnMode, RunningStats};
pub use conv::{conv3d_forward, conv3d_naive, conv_output_dim, Conv3dGeom};
pub use dense::Tensor;
pub use gradcheck::{grad_check, DEFAULT_FD_STEP};
pub use tape::{Gradients, Precision, Tape, Values, Var};
