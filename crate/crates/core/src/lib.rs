//! Source-free domain adaptation for time-series forecasting.
//!
//! A dual-branch (trend / seasonal) patch-attention forecaster is trained on a
//! labeled source domain with invariant disentangled feature learning, then
//! adapted to a target domain without access to source data. During
//! adaptation a frozen proxy forecaster supplies pseudo-labels whose bias is
//! corrected by the disagreement between the frozen source model and the
//! evolving target model before they are distilled into the target.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod decomposition;
pub mod forecaster;
pub mod invariance;
pub mod proxy;
pub mod rng;
pub mod tensor;
pub mod training;

pub use tensor::{Tensor, TensorError};
