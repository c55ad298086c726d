#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] choreo_core::Error),

    #[error("tensor backend: {0}")]
    Candle(#[from] candle_core::Error),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("dataset has no training samples")]
    EmptyDataset,

    #[error("layer {layer} outside 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("token id {id} outside codebook of size {k}")]
    IndexOutOfRange { id: usize, k: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("inference needs at least one step")]
    InvalidSteps,

    #[error("condition streams are not frame-aligned: {0}")]
    FrameMisalignment(String),

    #[error("training diverged: {0} is not finite")]
    NonFinite(String),
}

impl ModelError {
    pub fn is_io(&self) -> bool {
        matches!(self, ModelError::Core(e) if e.is_io())
    }

    pub fn is_numeric(&self) -> bool {
        match self {
            ModelError::Core(e) => e.is_numeric(),
            ModelError::NonFinite(_) => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
