use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mdp: {0}")]
    InvalidMdp(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("matrix is singular: eigenvalue {value:.3e} below floor {floor:.3e}")]
    Singular { value: f64, floor: f64 },
    #[error("matrix is not positive semi-definite: eigenvalue {0:.3e}")]
    NotPsd(f64),
    #[error("matrix is not symmetric: |A - A^T| = {0:.3e}")]
    NotSymmetric(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("path enumeration cap exceeded: {paths:.3e} paths > cap {cap:.3e}")]
    PathCapExceeded { paths: f64, cap: f64 },
    #[error("policy enumeration cap exceeded: {count:.3e} policies > cap {cap:.3e}")]
    PolicyCapExceeded { count: f64, cap: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("optimal design iteration cap reached after {iters} iterations (sup norm^2 {sup:.6})")]
    DesignIterationCap { iters: usize, sup: f64 },
    #[error("design support cannot be pruned to {target} atoms while keeping the 2d bound")]
    DesignPrune { target: usize },
    #[error("cell enumeration cap exceeded: more than {cap} cells")]
    CellCapExceeded { cap: usize },
    #[error("linear program solver failed: {0}")]
    LpFailure(String),
    #[error("empty csc instance")]
    EmptyCscInstance,
    #[error("csc instance has too many distinct states ({0} > 63)")]
    TooManyStates(usize),
    #[error("preconditioner budget exceeded at layer {layer}: {count} extends > budget {budget:.2}")]
    PrecondBudgetExceeded {
        layer: usize,
        count: usize,
        budget: f64,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("requested trajectory count {0:.3e} is too large to sample; override n_traj or use exact mode")]
    TrajectoryCountTooLarge(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
