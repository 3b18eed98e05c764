//! Desk-scale laboratory for SAR-MSI fusion classifiers.
//!
//! Everything needed to build, train and evaluate the four fusion
//! architectures (FM1-FM4) and their ablation variants on co-registered
//! Sentinel-1 / Sentinel-2 patch pairs: a dense tensor engine with
//! reverse-mode autodiff, spectral band grouping, label merging,
//! multi-scale Gaussian preprocessing, a deterministic synthetic dataset
//! generator, and the full classification metric suite (overall/subset
//! accuracy, Cohen's kappa, multiclass MCC, macro/weighted averages).

pub mod data;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod scalespace;
pub mod tensor;
pub mod training;

pub use element::Element;
pub use error::{Error, Result};
pub use tensor::{Parameter, Tensor};
