use thiserror::Error;

/// Errors produced by the analysis pipeline.
///
/// Variants map onto the exit-code contract of the command-line front end:
/// domain errors (2), numerical failures (3), and I/O or configuration
/// problems (1). See [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("no nonvanishing Taylor term found up to order {k_max}")]
    OrderExceedsCap { k_max: usize },

    #[error("point is not critical (residual {residual:.3e} > tolerance {tol:.3e})")]
    NotCritical { residual: f64, tol: f64 },

    #[error("critical point search converged on {converged} of {starts} starts")]
    SearchBudgetExhausted { converged: usize, starts: usize },

    #[error("pull-back metric is singular at r = {r}")]
    MetricSingular { r: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("trajectory tail too short: {got} samples, need {need}")]
    InsufficientTail { got: usize, need: usize },

    #[error("value decay requires positive values on the tail")]
    NonpositiveValues,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("linear part has no eigenvalue of modulus > 1")]
    NoUnstableDirection,

    #[error("invariant subspaces are ill-conditioned (min angle {angle:.3e})")]
    IllConditioned { angle: f64 },

    #[error("inverse iteration failed to contract after {iterations} iterations")]
    ContractionFailure { iterations: usize },

    #[error("root solve failed at node {node}: residual {residual:.3e}")]
    RootFindFailure { node: usize, residual: f64 },

    #[error("graph-transform preimage left the padded box at node {node}")]
    BoxEscape { node: usize },

    #[error("fixed-point iteration hit {iterations} iterations (last contraction ratio {last_ratio:.4})")]
    MaxIterations { iterations: usize, last_ratio: f64 },

    #[error("orbit overflowed at step {step}")]
    OrbitOverflow { step: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error: 1 I/O or config, 2 domain, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Json(_) | Error::Config(_) => 1,
            Error::Numerical(_)
            | Error::MetricSingular { .. }
            | Error::ContractionFailure { .. }
            | Error::RootFindFailure { .. }
            | Error::MaxIterations { .. }
            | Error::OrbitOverflow { .. }
            | Error::IllConditioned { .. }
            | Error::SearchBudgetExhausted { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!("non-finite {what}")))
    }
}
