use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("cycle detected in segment graph through bus {0}")]
    Cycle(usize),

    #[error("bus {0} is fed by more than one segment")]
    DuplicateSegment(usize),

    #[error("bus {0} is not connected to the feeder head")]
    Disconnected(usize),

    #[error("segment {from}->{to}: phase {phase} is absent at an endpoint")]
    PhaseMismatch { from: usize, to: usize, phase: char },

    #[error("segment {from}->{to}: reactance block is singular after the phase transform")]
    SingularReactance { from: usize, to: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("Hessian is not positive definite")]
    HessianNotPositiveDefinite,

    #[error("internal numerical failure: {0}")]
    Internal(String),

    #[error("power flow did not converge after {iterations} iterations (last |dV| = {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("voltage collapse at phase node {0}")]
    VoltageCollapse(usize),

    #[error("invalid limits: {0}")]
    InvalidLimits(String),

    #[error("scenario data: {0}")]
    Scenario(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("enumeration of {count} discrete trajectories exceeds the cap of {cap}")]
    EnumerationCap { count: u128, cap: u128 },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dim(what, expected, got))
    }
}
