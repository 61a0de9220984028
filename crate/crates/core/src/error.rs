use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid knot: {0}")]
    InvalidKnot(String),

    #[error("paths are sampled on incompatible time grids")]
    GridMismatch,

    #[error("position {pos:?} at t = {time} lies outside the unit domain")]
    OutsideDomain { time: f64, pos: Vec<f64> },

    #[error("invalid step cost parameters: {0}")]
    InvalidCost(String),

    #[error("step interval must be positive, got t0 = {t0}, t1 = {t1}")]
    NonPositiveInterval { t0: f64, t1: f64 },

    #[error("invalid forward model: {0}")]
    InvalidModel(String),

    #[error("unknown phantom `{0}`")]
    UnknownPhantom(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("no mesh path satisfies the velocity bound")]
    EmptyReachableSet,

    #[error("brute-force enumeration of {0} paths exceeds the limit")]
    InstanceTooLarge(u128),

    #[error("objective is not finite at the starting point")]
    NonFiniteObjective,

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
