use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown problem `{name}`; available: {}", available.join(", "))]
    UnknownProblem {
        name: String,
        available: Vec<String>,
    },

    #[error("unknown payoff `{name}`; available: {}", available.join(", "))]
    UnknownPayoff {
        name: String,
        available: Vec<String>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A step-size constraint is violated. `inequality` names it.
    #[error("step size not admissible: {inequality} violated ({detail})")]
    Admissibility { inequality: String, detail: String },

    #[error("grid misaligned: {0}")]
    GridMisaligned(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("implicit step did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("simulation failed at level {level}, path {path}: {source}")]
    Simulation {
        level: u32,
        path: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("regression needs at least 3 points with positive coordinates, got {0}")]
    InsufficientPoints(usize),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Wraps a per-path failure with the (level, path) it came from.
    pub(crate) fn at(self, level: u32, path: u64) -> Self {
        match self {
            e @ Error::Simulation { .. } => e,
            other => Error::Simulation {
                level,
                path,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, unwrapping simulation context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Simulation { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
