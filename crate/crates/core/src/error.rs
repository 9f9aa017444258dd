use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {left} vs {right}")]
    Shape { left: String, right: String },

    #[error("mask must be hard for serialization")]
    SoftMaskSerialization,

    #[error("mask must be hard: {0}")]
    MaskNotHard(&'static str),

    #[error("class {class_id} ({name}) is not supported by any registered guide")]
    OrphanClass { class_id: u8, name: String },

    #[error("prompt token `{token}` is not a class name; valid names: {}", valid.join(", "))]
    UnknownPromptToken { token: String, valid: Vec<String> },

    #[error("strength {0} outside [0, 1]")]
    StrengthRange(f64),

    #[error("length mismatch: expected {expected} {what}, got {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at step {step}: l_clip={l_clip}, l_seg={l_seg:?}, l_total={l_total}")]
    NonFinite {
        step: usize,
        l_clip: f64,
        l_seg: Vec<f64>,
        l_total: f64,
    },

    #[error("codec error: {0}")]
    Codec(String),

    #[error("backend `{name}` failed: {message}")]
    Backend { name: String, message: String },

    #[error("unknown candidate `{0}`")]
    UnknownCandidate(String),

    #[error("job is {actual}, expected {expected}")]
    InvalidState { expected: String, actual: String },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Shape {
            left: left.into(),
            right: right.into(),
        }
    }
}
