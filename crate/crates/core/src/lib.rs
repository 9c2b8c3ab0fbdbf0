//! Landmark-guided facial expression recognition with gated cross attention,
//! cross-similarity learning and expression-conditioned prompting, built on a
//! small reverse-mode tensor core.

pub mod backbones;
pub mod config;
pub mod csl;
pub mod dataset;
pub mod error;
pub mod lgae;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod vles;

pub use backbones::ImageSample;
pub use config::{AblationFlags, RunConfig};
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::checkpoint::Checkpoint;
pub use tensor::{Graph, Tensor, Var};
pub use training::{train, EvalReport, LossBreakdown, PairBatch};
