use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument is outside the documented domain of the operation.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("measures live on different action grids")]
    GridMismatch,

    /// A mathematical singularity, e.g. `log 0` in a first variation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The plain Sinkhorn iteration lost its scalings to under/overflow.
    #[error("Sinkhorn kernel underflow at eps = {eps}: retry with the log-domain solver")]
    KernelUnderflow { eps: f64 },

    /// A result was used in a way that requires convergence it does not have.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
