//! Training and inference for a single network that runs at any bit-width of
//! a configured set, all precisions derived from one shared weight set.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autograd`]: dense `f64` tensors and a reverse-mode tape.
//! - [`quant`]: weight/activation quantizers with straight-through backward rules.
//! - [`network`]: the shared-weight network, per-precision banks and the
//!   deployment bundle.
//! - [`trainer`]: collaborative training with teacher selection and block
//!   swapping, the baseline modes, calibration and evaluation.
//! - [`data`], [`checkpoint`], [`report`]: datasets, persistence and reporting.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod io;
pub mod network;
pub mod optim;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
