use mstat_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MstatError {
    /// Invalid hyper-parameters or configuration values.
    #[error("config error: {0}")]
    Config(String),
    /// Caller misuse of an operation (missing class token, wrong mode, ...).
    #[error("usage error: {0}")]
    Usage(String),
    /// Input that makes an operation meaningless (zero vectors, empty sets).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// Dataset or sampler contract violated, naming the offending record.
    #[error("data contract violated: {0}")]
    DataContract(String),
    /// Config text that does not parse.
    #[error("parse error at {location}: {detail}")]
    Parse { location: String, detail: String },
    /// A verification suite (gradient check, counter audit) failed.
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MstatError>;
