//! Weakly-supervised dense audio-visual event localization with
//! cross-modal salient anchors.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]),
//! the anchor-propagation network ([`model`]), feature file IO and a
//! synthetic data generator ([`data`]), weak-label training ([`train`]) and
//! tIoU-based mAP evaluation ([`eval`]).

pub mod autodiff;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};
