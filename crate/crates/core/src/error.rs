use thiserror::Error;

#[derive(Debug, Error)]
pub enum KrasError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("operator is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("inconsistent problem: {0}")]
    Inconsistent(String),
    #[error("conditioning failure: {0}")]
    Conditioning(String),
    #[error("did not converge: {0}")]
    Convergence(String),
    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<KrasError>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, KrasError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(KrasError::InvalidInput(msg.into()))
}
