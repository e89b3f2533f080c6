use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("depth must be a positive integer, got 0")]
    ZeroDepth,

    #[error("depth {depth} does not divide total depth {total}")]
    NotADivisor { depth: usize, total: usize },

    #[error("depth {depth} exceeds total depth {total}")]
    DepthOutOfRange { depth: usize, total: usize },

    #[error("pruning {total} layers down to {requested} removes every layer")]
    EmptyNetwork { total: usize, requested: usize },

    #[error("optimal assignment could not place depths {pending:?} within {cycles} reset cycles")]
    AssignmentStalled { pending: Vec<usize>, cycles: usize },

    #[error("average layer distance is undefined when every depth is 1")]
    ZeroNormalizer,

    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("gate vector has {got} {side} gates, model has {expected} layers")]
    GateLength {
        side: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("non-finite loss on batch {batch}")]
    NonFiniteLoss { batch: u64 },

    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("depth {0} is prime or 1: it has no intermediate divisor depths, so every strategy yields the same plan")]
    NotComposite(usize),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("plan mismatch: {0}")]
    PlanMismatch(String),

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("task sampling needs positive counts within the grid, got {n_enc}x{n_dec} for a {enc}x{dec} grid")]
    InvalidTaskSample {
        n_enc: usize,
        n_dec: usize,
        enc: usize,
        dec: usize,
    },

    #[error("cannot score an empty prediction set")]
    EmptyEvaluation,

    #[error("prediction count {predictions} does not match reference count {references}")]
    CountMismatch { predictions: usize, references: usize },

    #[error("grid shapes differ: {0}")]
    ShapeMismatch(String),

    #[error("unknown strategy {0:?} (expected one of: head, seq, left, middleleft, optimal)")]
    UnknownStrategy(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
