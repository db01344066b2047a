use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox { x1: f32, y1: f32, x2: f32, y2: f32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("could not place {requested} non-overlapping faces after {attempts} attempts")]
    Placement { requested: usize, attempts: usize },

    #[error("tile count {0} is not an allowed perfect square")]
    TileCount(usize),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (batch seed {batch_seed})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch_seed: u64,
    },
}
