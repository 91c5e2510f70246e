use thiserror::Error;

#[derive(Debug, Error)]
pub enum VelvetError {
    #[error("report has no sentence with at least two words")]
    EmptyReport,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("cap exceeded: {0}")]
    CapExceeded(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("record {id} rejected: {reason}")]
    RejectedRecord { id: String, reason: String },
    #[error("crop of {crop} voxels does not fit a volume of side {side}")]
    CropLargerThanVolume { crop: usize, side: usize },
    #[error("batch of {0} is too small, need at least 2")]
    BatchTooSmall(usize),
    #[error("attention context is empty")]
    EmptyContext,
    #[error("pair {0} has no valid local units")]
    NoValidUnits(usize),
    #[error("no masked positions to score")]
    NoMaskedPositions,
    #[error("block size {block} does not divide volume side {side}")]
    BadBlockSize { block: usize, side: usize },
    #[error("rotation plane is not square ({0}x{1})")]
    NonSquarePlane(usize, usize),
    #[error("loss component {0} is enabled but was not computed")]
    MissingComponent(&'static str),
    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: u64, dump: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, VelvetError>;
