//! Uncertainty-calibrated attention models for a synthetic mini-VQA task.
//!
//! The crate trains a small multimodal classifier whose attention map is
//! shaped by gradient-certainty updates: per-class logit variances feed
//! aleatoric/predictive uncertainty losses, and the product of uncertainty
//! and classification gradients at the attended feature map is rectified,
//! normalized, and added back residually during backpropagation.
//!
//! Modules mirror the pipeline stages:
//!
//! - [`numerics`] — stable scalar/array primitives and seeded RNG streams
//! - [`model`] — the toy encoder/attention/classifier with explicit VJPs
//!   and a gradient tap at the attended feature map
//! - [`losses`] — cross-entropy, distorted-logit uncertainty losses,
//!   variance equalizer, distorted-gap penalty, and the joint cost
//! - [`gca`] — certainty-mask construction, residual gradient injection,
//!   and the training step
//! - [`metrics`] — consensus accuracy, rank correlation, 2-D earth mover
//!   distance, and uncertainty/error analysis
//! - [`data`] — synthetic scene/question generator with ground-truth
//!   attention, plus JSONL dataset I/O
//! - [`cli`] — the `ucam` command-line front end
//!
//! The primary interface is the library together with the runnable
//! `examples/`; the `ucam` binary is a thin wrapper over [`cli`].

use std::path::PathBuf;

pub mod cli;
pub mod config;
pub mod data;
pub mod gca;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod train;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("empty reduction")]
    EmptyReduction,
    #[error("empty batch")]
    EmptyBatch,
    #[error("out-of-vocabulary token: {0:?}")]
    OutOfVocabulary(String),
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("negative variance: {0}")]
    NegativeVariance(f64),
    #[error("Monte Carlo sample count must be at least 1")]
    InvalidSampleCount,
    #[error("mode {0} requires a Monte Carlo configuration")]
    MissingMcConfig(String),
    #[error("unknown mode {got:?}; valid modes: {valid}")]
    UnknownMode { got: String, valid: String },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("undefined correlation: map has zero rank variance")]
    UndefinedCorrelation,
    #[error("attention map not normalized: sum = {0}")]
    UnnormalizedMap(f64),
    #[error("expected exactly 10 annotations, got {0}")]
    AnnotationCount(usize),
    #[error("misclassification probability must lie in [0, 1), got {0}")]
    InvalidMisclassification(f64),
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("analysis needs at least two records, got {0}")]
    TooFewRecords(usize),
    #[error("unknown gradient node {0:?}")]
    UnknownNode(String),
    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),
    #[error("checkpoint not found at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image encoding failed: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use config::RunConfig;
pub use gca::{CertaintyHeatmap, CertaintyMask, GcaConfig};
pub use losses::{LossBundle, McConfig, Mode, UncertaintyEstimate};
pub use model::{ModelConfig, Parameters};
pub use numerics::{ProbabilityVector, RngStream};
