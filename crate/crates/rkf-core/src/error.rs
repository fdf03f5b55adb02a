//! Error types shared across the crate.

/// Errors produced by factorizations, solvers and recursions.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A matrix required to be positive definite was not (a Cholesky pivot
    /// or eigenvalue was non-positive). Usually signals a degenerate
    /// covariance or a tolerance too large for the horizon.
    #[error("matrix not positive definite: {context}")]
    NotPositiveDefinite { context: String },

    /// A symmetric matrix function was evaluated outside its domain.
    #[error("eigenvalue {eigenvalue} outside the domain of {function}")]
    SpectrumOutOfDomain {
        function: &'static str,
        eigenvalue: f64,
    },

    /// The risk parameter violates `theta^-1 > (1-tau) * ||P||`.
    #[error("theta = {theta} outside admissible range (must satisfy theta < {limit})")]
    ThetaOutOfRange { theta: f64, limit: f64 },

    /// The tolerance exceeds what the budget function can reach on the
    /// admissible interval (numerical breakdown near the singular boundary).
    #[error("tolerance c = {c} not reachable by the budget function (sup over admissible theta was {reached})")]
    BudgetUnreachable { c: f64, reached: f64 },

    /// The root finder hit its iteration cap without meeting tolerance.
    #[error("root finder did not converge after {iterations} iterations (residual {residual})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Incompatible dimensions between matrices, vectors or sequences.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A state-space model failed validation.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A recursion failed at a specific time step.
    #[error("at time step {t}: {source}")]
    AtStep {
        t: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the time step at which it occurred.
    pub fn at_step(self, t: usize) -> Error {
        match self {
            Error::AtStep { .. } => self,
            other => Error::AtStep {
                t,
                source: Box::new(other),
            },
        }
    }

    /// The time step attached to this error, if any.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::AtStep { t, .. } => Some(*t),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
