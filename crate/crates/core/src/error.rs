use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polyline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("point {0} is not finite")]
    NonFinitePoint(usize),
    #[error("invalid box [{x_min}, {y_min}, {x_max}, {y_max}]: need finite x_min < x_max and y_min < y_max")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SerializeError {
    #[error("reasoning text contains reserved tag `{0}`")]
    ReservedTag(&'static str),
    #[error("expected {expected} waypoints, got {got}")]
    WrongPointCount { expected: usize, got: usize },
    #[error("waypoint {0} is not finite")]
    NonFinite(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("trajectory length mismatch: prediction has {pred} points, ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("trajectories must contain at least one point")]
    Empty,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy shape: {0}")]
    Shape(String),
    #[error("invalid sampling config: {0}")]
    Sampling(String),
    #[error("context has {got} features, policy expects {expected}")]
    ContextDim { expected: usize, got: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("reasoning word `{0}` is not in the vocabulary")]
    UnknownWord(String),
    #[error("expected {expected} waypoints, got {got}")]
    WaypointCount { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("logprob record for rollout {rollout} has {logprobs} entries but {tokens} tokens")]
    LengthMismatch {
        rollout: usize,
        logprobs: usize,
        tokens: usize,
    },
    #[error("non-finite loss at step {step}: {dump}")]
    NonFinite { step: usize, dump: String },
    #[error("no trainable samples in batch ({skipped} skipped)")]
    EmptyBatch { skipped: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {field}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("infeasible split: {0}")]
    Infeasible(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("safety scores need at least 2 models (got {0}); compare raw metrics instead")]
    TooFewModels(usize),
    #[error("no scenes to evaluate")]
    NoScenes,
    #[error("weight scheme `{0}` has a negative weight")]
    NegativeWeight(String),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing prerequisite: {path} not found; run `planlab {stage}` first")]
    MissingStage { stage: &'static str, path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl ExperimentError {
    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            ExperimentError::Config(_) => "config",
            ExperimentError::MissingStage { .. } => "missing_stage",
            ExperimentError::Io { .. } => "io",
            ExperimentError::Data(DataError::Io { .. }) => "io",
            ExperimentError::Data(_) => "data",
            ExperimentError::Train(_) => "train",
            ExperimentError::Eval(_) => "eval",
            ExperimentError::Policy(_) => "policy",
        }
    }
}
