//! Degradation-type unlearning for all-in-one image restoration.
//!
//! A compact residual CNN is trained to undo synthetic noise, haze and rain,
//! then fine-tuned to lose exactly one of those abilities while keeping the
//! others.

pub mod autodiff;
pub mod degrade;
pub mod error;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod rng;
pub mod train;
pub mod unlearn;

pub use autodiff::{Graph, Tensor, Var};
pub use degrade::{DegradationKind, DegradationSpec, DegradedPair};
pub use error::{Error, Result};
pub use metrics::{evaluate, psnr, ssim, MetricReport};
pub use model::{ModelConfig, RestorationModel};
pub use unlearn::{partition, DatasetPartition, UnlearnConfig};
