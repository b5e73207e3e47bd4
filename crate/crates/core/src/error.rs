use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{values} values do not fill shape {shape:?}")]
    BadShape { shape: Vec<usize>, values: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("tape already replayed; record a new forward pass before calling backward again")]
    TapeConsumed,

    #[error("variable belongs to a different tape")]
    ForeignTape,

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("final halting gate must be 1, got {0}")]
    FinalGateNotOne(f64),

    #[error("{value} outside support 1..={max}")]
    OutOfSupport { value: usize, max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("variance probe needs at least 2 samples, got {0}")]
    InsufficientSamples(usize),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
