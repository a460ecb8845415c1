use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("client {index}: {reason}")]
    InvalidClient { index: usize, reason: String },

    #[error("client {index}: participation {q} is outside the valid domain ({reason})")]
    Domain {
        index: usize,
        q: f64,
        reason: &'static str,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("budget {budget} is infeasible; the minimal feasible budget is {minimal}")]
    InfeasibleBudget { budget: f64, minimal: f64 },

    #[error("bisection failed to bracket the root: {0}")]
    Bracket(String),

    #[error("client {0} has an empty shard")]
    EmptyShard(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("bad IDX magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: expected {expected} bytes of payload, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("image/label count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("infeasible partition: class {class} needs {needed} samples but only {available} are available")]
    InfeasiblePartition {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
