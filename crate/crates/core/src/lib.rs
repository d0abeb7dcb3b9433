//! Micro deep-learning framework and experiment harness for transfer learning
//! with layer-wise fine-tuning.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a define-by-run
//!   reverse-mode tape with the operations a small Inception-style CNN needs.
//! - [`gradcheck`]: central finite-difference verification of tape gradients.
//! - [`nn`]: layers, the mini-Inception model builder and checkpoints.
//! - [`optim`]: SGD with momentum driven by a per-layer learning-rate map, the
//!   exponentially decaying per-layer schedule, Adam, plateau division and
//!   early stopping.
//! - [`finetune`]: freeze policies (RI, FE, nFT, AllFT, FTED), weight transfer
//!   and the training loop.
//! - [`data`]: PGM/contour ingestion, ROI cropping, contrast normalization,
//!   augmentation, stratified splits and a synthetic transfer benchmark.
//! - [`metrics`]: accuracy, run aggregation, ROC curves and AUC.
//! - [`harness`]: experiment configuration, the variant matrix runner and
//!   report files.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod harness;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use autodiff::{GradientMap, NodeId, ParamId, Tape};
pub use error::{Error, Result};
pub use tensor::Tensor;
