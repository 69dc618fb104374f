use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("{0} is not symmetric positive semidefinite")]
    NotPsd(&'static str),
    #[error("horizon must be positive, got {0}")]
    NonpositiveHorizon(f64),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("density has zero mass")]
    ZeroMass,
    #[error("tabulated density does not decay at the domain edges (edge/max = {ratio:e})")]
    EdgeDecay { ratio: f64 },
    #[error("Riccati solution blew up at t = {t}")]
    RiccatiBlowup { t: f64 },
    #[error("identity violated: {what} residual {residual:e} exceeds {tolerance:e}")]
    IdentityViolation {
        what: &'static str,
        residual: f64,
        tolerance: f64,
    },
    #[error("tilt matrix is singular (condition number {condition:e})")]
    SingularTilt { condition: f64 },
    #[error("underflow: log value {log_value} is not representable")]
    Underflow { log_value: f64 },
    #[error("grid domain too narrow: boundary/max = {ratio:e}")]
    DomainTooNarrow { ratio: f64 },
    #[error("CFL condition violated: dt = {dt:e} exceeds {limit:e}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("negative density {value:e} after transport substep")]
    NegativeDensity { value: f64 },
    #[error("degenerate particle weights (ESS = {ess:.3})")]
    DegenerateWeights { ess: f64 },
    #[error("operation requires a one-dimensional model ({0})")]
    Unsupported(&'static str),
    #[error("time index {index} is not stored in the field")]
    MissingSlice { index: usize },
    #[error("config error at `{path}`: {message}")]
    ConfigParse { path: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
