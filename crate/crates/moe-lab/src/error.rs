//! Crate-wide error type.
//!
//! Graph construction panics on malformed shapes (those are programming
//! errors caught at op-recording time, with messages naming the op and both
//! shapes); everything a caller can plausibly get wrong at runtime — bad
//! tokens, bad configs, bad files — comes back as a structured [`Error`].

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("token id {token} out of range (vocab {vocab}) at position {position}")]
    TokenOutOfRange {
        token: u32,
        vocab: usize,
        position: usize,
    },

    #[error("gradient check failed for parameter {name}: {detail}")]
    GradCheck { name: String, detail: String },

    #[error("expansion target {requested} is below current expert count {current}")]
    ShrinkExpansion { requested: usize, current: usize },

    #[error("no teacher exists before phase 1 (requested phase {0})")]
    NoTeacher(usize),

    #[error("distillation with lambda > 0 requires a teacher")]
    MissingTeacher,

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("forgetting drop undefined for non-positive baseline {0}")]
    NonPositiveBaseline(f64),

    #[error("degenerate generator: {0}")]
    DegenerateGenerator(String),

    #[error("invalid config:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    UnsupportedCheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("learning-rate schedule is defined for steps t >= 1, got {0}")]
    BadScheduleStep(usize),

    #[error("run artifacts missing: {0}")]
    MissingArtifact(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
