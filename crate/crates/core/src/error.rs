use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite numeric input: {0}")]
    NumericInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("solver failed after {iterations} iterations (residual {residual:e}): {message}")]
    Solver {
        message: String,
        iterations: usize,
        residual: f64,
    },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("divergence at round {round}, local step {step}: loss = {loss}")]
    Divergence { round: usize, step: usize, loss: f64 },

    #[error("convergence error: {0}")]
    Convergence(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
