use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("decomposition failure: {0}")]
    Decomposition(String),

    #[error("training failure: {0}")]
    Training(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed for condition `{condition}`: {source}")]
    Stage {
        stage: String,
        condition: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn decomposition(msg: impl Into<String>) -> Self {
        Error::Decomposition(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Wraps an error with the pipeline stage and condition it came from.
    pub fn in_stage(self, stage: &str, condition: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            condition: condition.to_string(),
            source: Box::new(self),
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Decomposition(_) | Error::Training(_) => 3,
            Error::Format { .. } | Error::Io(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
