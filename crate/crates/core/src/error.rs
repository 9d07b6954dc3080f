use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is off the manifold (residual {residual:.3e} > tolerance {tol:.3e})")]
    Membership { residual: f64, tol: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("constraint Jacobian is rank deficient at the queried point")]
    RankDeficientConstraint,

    #[error("projection onto the manifold is ill-posed: {0}")]
    Focal(String),

    #[error("retraction undefined: {0}")]
    Retraction(String),

    #[error("input is not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("gradient undefined: {0}")]
    UndefinedGradient(String),

    #[error("empty data")]
    EmptyData,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown name `{0}`")]
    Unknown(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
