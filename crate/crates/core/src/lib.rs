//! Entropy-guided adversarial rollout sampling for group-relative policy
//! optimization, at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, a tiny
//! image-conditioned autoregressive policy, a synthetic counting task with a
//! rule-based reward, and a trainer that can mix rollouts sampled on clean
//! images with rollouts sampled on images perturbed to raise policy entropy.
//!
//! With the default `parallel` feature, per-sample work (rollouts, attacks,
//! gradient accumulation, evaluation) is spread over rayon's pool. Results are
//! always reduced in sample-index order, so both builds produce identical bits.

pub mod autodiff;
pub mod egas;
pub mod grpo;
pub mod harness;
pub mod parallel;
pub mod policy;
pub mod rollout;
pub mod rng;
pub mod task;

pub use autodiff::{Graph, Tensor, Var};
pub use egas::{egas_attack, AttackConfig};
pub use grpo::{Mode, StepMetrics, TrainerConfig};
pub use harness::{RunConfig, RunRecord};
pub use policy::{ModelConfig, PolicyParams};
pub use rollout::{Origin, Rollout, RolloutGroup, Selection};
pub use task::{Reward, TaskSample};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid logits")]
    InvalidLogits,
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("bad image shape: expected {expected:?}, got {got:?}")]
    BadImageShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("question id {id} out of range for {count} questions")]
    QuestionOutOfRange { id: usize, count: usize },
    #[error("empty response")]
    EmptyResponse,
    #[error("group too small: need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("rollout/sample mismatch")]
    RolloutSampleMismatch,
    #[error("rollout is missing old log-probabilities")]
    MissingOldLogprobs,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
