use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid link chain: {0}")]
    InvalidChain(String),

    #[error("selector {selector} out of range for a {dof}-dof robot")]
    SelectorOutOfRange { selector: String, dof: usize },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("inertia matrix is ill conditioned (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("zero CBF gradient for task `{0}`")]
    ZeroGradient(String),

    #[error("invalid stack: {0}")]
    InvalidStack(String),

    #[error("quadratic program is infeasible")]
    Infeasible,

    #[error("quadratic program did not converge within {0} iterations")]
    MaxIterations(usize),

    #[error("cost matrix is not positive definite after regularization")]
    NotConvex,

    #[error("KKT block matrix is singular (rank loss)")]
    RankLoss,

    #[error("torque {norm:.6} outside the bound {u_max}")]
    TorqueOutOfBounds { norm: f64, u_max: f64 },

    #[error("solver failed at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("scenario error at {pointer}: {message}")]
    Schema { pointer: String, message: String },

    #[error("invalid scenario: {0}")]
    Scenario(String),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::Step { .. } => e,
            e => Error::Step {
                step,
                source: Box::new(e),
            },
        }
    }

    /// `true` for failures of the numerical solver as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::Infeasible
            | Error::MaxIterations(_)
            | Error::NotConvex
            | Error::RankLoss
            | Error::IllConditioned(_) => true,
            Error::Step { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}
