use maskguide::jobspec::ValidationErrors;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{what} `{id}` not found")]
    NotFound { what: &'static str, id: String },
    #[error("invalid job spec:\n{0}")]
    Validation(ValidationErrors),
    #[error("job `{id}` is {status}, expected {expected}")]
    Conflict {
        id: String,
        status: String,
        expected: &'static str,
    },
    #[error("journal {path} line {line}: {message}")]
    Journal { path: String, line: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] maskguide::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ServiceError {
    pub fn not_found(what: &'static str, id: impl Into<String>) -> Self {
        ServiceError::NotFound { what, id: id.into() }
    }
}
