//! Deformable 3D image registration with a spiking U-Net.
//!
//! The pipeline trains an analog U-Net teacher, converts it into a spiking
//! student by percentile threshold calibration, and fine-tunes the student with
//! surrogate gradients. Everything is CPU-only and sized for small synthetic
//! volumes.
//!
//! Tensor layout is channels-major: `[C, D, H, W]` for activations and
//! `[Cout, Cin, k, k, k]` for convolution weights. There is no batch axis;
//! training uses batch size one.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod conversion;
pub mod deform;
pub mod energy;
pub mod error;
pub mod io;
pub mod lif;
pub mod losses;
pub mod metrics;
pub mod stats;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Precision, Tape, Tensor, Var};
