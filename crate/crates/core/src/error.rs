use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("curve {index} ({id}) rejected: {reason}")]
    InvalidCurve {
        index: usize,
        id: String,
        reason: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("near-degenerate shape: sigma ratio {ratio:e} below 1e-12")]
    NearDegenerate { ratio: f64 },

    #[error("alignment degenerate: {0}")]
    AlignmentDegenerate(String),

    #[error("target outside injectivity radius: largest principal angle {angle}")]
    OutOfInjectivity { angle: f64 },

    #[error("Karcher mean did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        last: Box<nalgebra::DMatrix<f64>>,
    },

    #[error("requested rank {requested} exceeds achievable rank {achievable}")]
    RankExceeded { requested: usize, achievable: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Coarse category used by the command line front end.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. } | Error::Contract(_) | Error::Config(_) | Error::Json(_) => {
                ErrorKind::Usage
            }
            Error::RankExceeded { .. } => ErrorKind::Usage,
            Error::InvalidCurve { .. }
            | Error::Degenerate(_)
            | Error::NearDegenerate { .. }
            | Error::AlignmentDegenerate(_)
            | Error::OutOfInjectivity { .. }
            | Error::NonConvergence { .. } => ErrorKind::Degeneracy,
            Error::Io(_) => ErrorKind::Internal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Internal,
    Usage,
    Degeneracy,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Internal => 1,
            ErrorKind::Usage => 2,
            ErrorKind::Degeneracy => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Internal => "internal",
            ErrorKind::Usage => "usage",
            ErrorKind::Degeneracy => "degeneracy",
        }
    }
}
