use thiserror::Error;

/// Crate-wide error type. Inference and data preparation return these as
/// values; contract violations on plain numeric kernels panic instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// All probability mass sits in the dead state, so prevalence among the
    /// living is undefined.
    #[error("degenerate cohort: no surviving probability mass")]
    DegenerateCohort,

    #[error("optimizer did not converge: {message}; trace of last iterates (objective, gradient norm): {trace:?}")]
    NonConvergence {
        message: String,
        trace: Vec<(f64, f64)>,
    },

    /// The negated Hessian at the mode must be positive definite for a
    /// Laplace approximation to exist.
    #[error("negated Hessian is not positive definite: eigenvalue {min_eigenvalue:.3e} below threshold {threshold:.1e}; consider fixing a smoothness hyperparameter (hp_fixed)")]
    NotPositiveDefinite {
        min_eigenvalue: f64,
        threshold: f64,
    },

    #[error("numeric search failed: {0}")]
    SearchFailed(String),

    #[error("infeasible constraints: {0}")]
    Infeasible(String),

    #[error("unknown hyperparameter {name:?}; expected one of {known:?}")]
    UnknownHyperparameter { name: String, known: Vec<String> },

    #[error("unsupported model configuration: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
