use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mechanism: {0}")]
    InvalidMechanism(String),

    #[error("infinite moment integral for drift entry ({i}, {j})")]
    InfiniteMoment { i: usize, j: usize },

    #[error("quadrature did not converge: achieved error {achieved:e}, requested {requested:e}")]
    Quadrature { achieved: f64, requested: f64 },

    #[error("drift matrix is not irreducible")]
    NotIrreducible,

    #[error("dominant eigenvalue could not be isolated: {0}")]
    NoDominantEigenvalue(String),

    #[error("mechanism is not supercritical (lambda1 = {0})")]
    NotSupercritical(f64),

    #[error("x log x condition fails; use the xlogx experiment for this mechanism")]
    XlogxFails,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("immigration cap of {cap} events exceeded")]
    ImmigrationCap { cap: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
