use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is outside the operation's domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Parameters and inputs disagree on dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("episode sampling failed for class {class}: {reason}")]
    Sampling { class: String, reason: String },

    #[error("class {class} has no points")]
    EmptyClass { class: usize },

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("linear solver failure: {0}")]
    Solver(String),

    #[error("non-finite loss {loss} at iteration {iteration} (seed {seed})")]
    NonFiniteLoss { iteration: usize, seed: u64, loss: f64 },

    #[error("bad magic in {path}: expected {expected}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("count mismatch in {path}: {reason}")]
    CountMismatch { path: PathBuf, reason: String },

    #[error("refusing to overwrite existing {0} (use --force)")]
    Exists(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
