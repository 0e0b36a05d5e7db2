use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("evaluation left the domain box at {point:?}")]
    Domain { point: Vec<f64> },
    #[error("simulation left the domain box at t = {time}")]
    SimulationExit { time: f64, state: Vec<f64> },
    #[error("nlp solve failed ({status}): kkt residual {kkt_residual:.3e}")]
    Solver { status: String, kkt_residual: f64 },
    #[error("all steady-state starts failed: {0}")]
    SteadyState(String),
    #[error("too few usable samples for an exponential fit: {found} < {required}")]
    TooFewSamples { found: usize, required: usize },
    #[error("precondition not met: {0}")]
    Precondition(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
