use thiserror::Error;

/// Failure modes shared by every solver in the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("evaluation failed in {op}: {detail}")]
    Evaluation { op: &'static str, detail: String },

    #[error("accuracy target missed in {op}: estimate {estimate:.3e} exceeds {limit:.3e}")]
    Accuracy {
        op: &'static str,
        estimate: f64,
        limit: f64,
    },

    #[error("rank-deficient regression design at step {step}: {detail}")]
    RankDeficient { step: usize, detail: String },

    #[error("non-finite values in {op} at step {step}")]
    Divergence { op: &'static str, step: usize },

    #[error("fixed point did not converge in {} iterations (last residual {:.3e})", .residuals.len(), .residuals.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { residuals: Vec<f64> },

    #[error("invalid configuration at `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("i/o failure: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn evaluation(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Evaluation {
            op,
            detail: detail.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
