use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate vector (norm {norm:e}) in {op}")]
    DegenerateVector { op: &'static str, norm: f64 },

    #[error("batch norm in train mode needs at least 2 rows, got {rows}")]
    InsufficientBatch { rows: usize },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("stale gallery store: store is at version {store}, operation targets stage {requested}")]
    StaleStore { store: u32, requested: u32 },

    #[error("skipped stage: records at version {found}, update targets stage {requested}")]
    SkippedStage { found: u32, requested: u32 },

    #[error("no old classifier: anti-forgetting needs at least one old identity")]
    NoOldClassifier,

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("privacy violation: raw inputs of closed stage {stage} requested at stage {current}")]
    PrivacyViolation { stage: u32, current: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
