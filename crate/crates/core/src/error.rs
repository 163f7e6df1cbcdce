//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: dimension mismatch (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("zero normal vector")]
    ZeroNormal,

    #[error("infeasible constraint set: best residual {residual:.3e}")]
    Infeasible { residual: f64 },

    #[error("inconsistent equality constraints: least-squares residual {residual:.3e}")]
    InconsistentEqualities { residual: f64 },

    #[error("projection did not converge within {max_iter} sweeps (residual {residual:.3e})")]
    ProjectionMaxIter {
        max_iter: usize,
        residual: f64,
        /// Best iterate found before giving up.
        best: Vec<f64>,
    },

    #[error("graph is not connected")]
    Disconnected,

    #[error("graph has no edges; {0} schedule cannot draw one")]
    EmptyEdgeSet(&'static str),

    #[error("singular linear system")]
    SingularSystem,

    #[error("active-set enumeration bound exceeded: {count} inequality constraints (limit {limit})")]
    EnumerationBound { count: usize, limit: usize },

    #[error("problem is unbounded below or has no feasible KKT candidate")]
    UnboundedOrInfeasible,

    #[error("inner optimization diverged for agent {agent} at iteration {iteration}: objective rose {consecutive} consecutive steps (last {objective:.6e})")]
    InnerDivergence {
        agent: usize,
        iteration: usize,
        consecutive: usize,
        objective: f64,
    },

    #[error("solver did not reach tolerance within {max_iter} iterations (residual {residual:.3e})")]
    SolverMaxIter { max_iter: usize, residual: f64 },

    #[error("unsupported problem structure: {0}")]
    Unsupported(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{context}: {source}")]
    AtIteration {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach an iteration index to an error bubbling out of the run loop.
    pub fn at_iteration(self, k: usize) -> Error {
        Error::AtIteration {
            context: format!("iteration {k}"),
            source: Box::new(self),
        }
    }

    pub fn config(line: usize, message: impl Into<String>) -> Error {
        Error::Config {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
