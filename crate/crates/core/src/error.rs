use thiserror::Error;

/// Errors raised anywhere in the controller pipeline.
#[derive(Debug, Error)]
pub enum SmpcError {
    #[error("dimension mismatch between {left} and {right}: {detail}")]
    Dimension {
        left: &'static str,
        right: &'static str,
        detail: String,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("Lyapunov iteration diverges: spectral radius {radius} of the scaled map is not below 1")]
    Divergence { radius: f64 },

    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: &'static str, detail: String },

    #[error("fixed-point iteration did not converge for mu = {mu} after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        mu: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("gain at mu = {mu} failed certification: {reason}")]
    Certification { mu: f64, reason: String },

    #[error("gain library synthesis failed at mu = {mu}: {source}")]
    Synthesis {
        mu: f64,
        #[source]
        source: Box<SmpcError>,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("MPC problem infeasible: minimal constraint value exceeds epsilon by {gap:e}")]
    Infeasible { gap: f64 },

    #[error("no gain in the library makes the initial state feasible (smallest gap {gap:e} at mu = {mu})")]
    InitialInfeasible { gap: f64, mu: f64 },

    #[error("library was built for a different model (expected hash {expected}, found {found})")]
    StaleLibrary { expected: String, found: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("internal consistency failure at step {step}: {detail}")]
    Consistency { step: usize, detail: String },

    #[error("run with seed {seed} failed: {source}")]
    Run {
        seed: u64,
        #[source]
        source: Box<SmpcError>,
    },
}

pub type Result<T> = std::result::Result<T, SmpcError>;

impl SmpcError {
    pub(crate) fn dim(left: &'static str, right: &'static str, detail: impl Into<String>) -> Self {
        SmpcError::Dimension {
            left,
            right,
            detail: detail.into(),
        }
    }

    pub(crate) fn numerical(context: &'static str, detail: impl Into<String>) -> Self {
        SmpcError::Numerical {
            context,
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            SmpcError::Dimension { .. } => "dimension",
            SmpcError::InvalidModel(_) => "invalid_model",
            SmpcError::Parse(_) => "parse",
            SmpcError::Divergence { .. } => "divergence",
            SmpcError::Numerical { .. } => "numerical",
            SmpcError::NonConvergence { .. } => "non_convergence",
            SmpcError::Certification { .. } => "certification",
            SmpcError::Synthesis { .. } => "synthesis",
            SmpcError::InvalidGrid(_) => "invalid_grid",
            SmpcError::Infeasible { .. } => "infeasible",
            SmpcError::InitialInfeasible { .. } => "initial_infeasible",
            SmpcError::StaleLibrary { .. } => "stale_library",
            SmpcError::Usage(_) => "usage",
            SmpcError::Consistency { .. } => "consistency",
            SmpcError::Run { .. } => "run",
        }
    }
}
