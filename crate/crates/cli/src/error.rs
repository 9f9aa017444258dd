use maskguide::jobspec::ValidationErrors;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_STAGE_FAILED: i32 = 3;
pub const EXIT_PORT_IN_USE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid job:\n{0}")]
    Validation(ValidationErrors),
    #[error("{0}")]
    Manifest(String),
    #[error("job failed: {0}")]
    StageFailed(String),
    #[error("cannot bind {addr}: address already in use")]
    PortInUse { addr: String },
    #[error(transparent)]
    Core(#[from] maskguide::Error),
    #[error(transparent)]
    Service(#[from] maskguide_service::ServiceError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Validation(_) | CliError::Manifest(_) => EXIT_USAGE,
            CliError::StageFailed(_) => EXIT_STAGE_FAILED,
            CliError::PortInUse { .. } => EXIT_PORT_IN_USE,
            _ => EXIT_INTERNAL,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
