//! Multivariate time-series anomaly detection.
//!
//! The model reconstructs sliding windows of a normalized multivariate
//! series through four stages: a learned feature-interaction graph over
//! hidden channels, an attention encoder, a variational bottleneck, and an
//! attention decoder. The anomaly score of a timestamp is the Euclidean norm
//! of the reconstruction residual at the last step of the window ending
//! there. Detection quality is reported as best-F1 over an exhaustive
//! threshold sweep under point-adjust.

pub mod attn;
pub mod autodiff;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graphfi;
pub mod kv;
pub mod model;
pub mod params;
pub mod selfcheck;
pub mod synthetic;
pub mod train;
pub mod varenc;

pub use error::{Error, Result};
pub use model::{ForwardTrace, HifiConfig, LatentSampling, Variant};
pub use params::ParamStore;
pub use train::{TrainConfig, TrainLog};
