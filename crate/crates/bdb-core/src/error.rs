use thiserror::Error;

/// Errors surfaced by every layer of the library.
///
/// Variants map one-to-one onto the failure categories of the public
/// contracts: shape problems, invalid drop specifications, malformed
/// batches, bad files, infeasible configurations, and so on.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("batch-size error: {0}")]
    BatchSize(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("batch-composition error: {0}")]
    BatchComposition(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by invalid configuration or specification
    /// rather than a runtime failure. The CLI maps these to exit code 2.
    pub fn is_config_like(&self) -> bool {
        matches!(self, Error::Spec(_) | Error::Config(_) | Error::Schedule(_))
    }
}
