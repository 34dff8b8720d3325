use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("invalid step sizes: {0}")]
    StepSizeInvalid(String),
    #[error("infeasible slack problem: {0}")]
    Infeasible(String),
    #[error("partition cap exceeded: {size} candidate blocks, cap {cap}{}", .iteration.map(|k| format!(" (iteration {k})")).unwrap_or_default())]
    PartitionCapExceeded { size: usize, cap: usize, iteration: Option<usize> },
    #[error("no partition satisfies the cone conditions: {0}")]
    NoValidPartition(String),
    #[error("no ray representative exists for block {0}")]
    RayRepresentativeInfeasible(usize),
    #[error("could not make the gradient operator injective")]
    InjectivityRepairFailed,
    #[error("psi vanishes: the sampled gradients contain the origin in their hull")]
    DegeneratePsiZero,
}

impl Error {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::BadInput(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::NoConvergence { .. } => 3,
            Error::PartitionCapExceeded { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
