//! Decomposition of a dense convolutional classifier into a shared backbone
//! and per-task low-rank experts.
//!
//! The building blocks, bottom up:
//!
//! * [`tensor`] and [`autodiff`]: `f64` tensors and a reverse-mode tape.
//! * [`conv`]: im2col convolution, plain and grouped, with FLOP accounting.
//! * [`eks`]: the multi-task convolution layer, its single-pass forward,
//!   fusion and switching.
//! * [`losses`]: temperature softmax, feature distillation and the per-task loss.
//! * [`model`] and [`checkpoint`]: teacher / student networks, expert export
//!   and the on-disk format.
//! * [`data`]: seeded synthetic multi-task image sets.
//! * [`train`], [`metrics`], [`verify`]: training loop, evaluation and the
//!   invariant suite.
//! * [`cli`]: the `eks` command-line front end.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod conv;
pub mod data;
pub mod eks;
pub mod error;
pub mod gradcheck;
pub mod instrument;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use conv::{conv_flops, ConvSpec};
pub use eks::{eks_cost_model, eks_param_count, EksConvLayer, LowRankExpert, TaskMask};
pub use error::{EksError, Result};
pub use tensor::Tensor;
