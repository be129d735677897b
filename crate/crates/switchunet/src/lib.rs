//! Switch-configurable U-Net family for binary segmentation.
//!
//! One architecture, five switches: recurrent/CBR set selection, residual
//! projections, attention-gated skips, and filter doubling. The crate is
//! self-contained: a rank-4 tensor type with reverse-mode autodiff, the
//! network assembly, hybrid cross-entropy + dice training, overlapped
//! patch-based inference, and the full evaluation/reporting suite.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability (parameter reporting, toy training, prediction, metrics,
//! decoder-feature export).

pub mod blocks;
pub mod commands;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod params;
pub mod patch;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
