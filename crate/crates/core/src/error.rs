use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("partition error: label {label} has {count} samples, at least {needed} required")]
    Partition { label: u8, count: usize, needed: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("access error: feature {feature} requires gray-box access but the stage is black-box only")]
    Access { feature: String },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("training error: {0}")]
    Training(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 validation, 2 runtime/training, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Argument(_)
            | Error::Config(_)
            | Error::Partition { .. }
            | Error::Access { .. } => 1,
            Error::Shape(_) | Error::Diverged { .. } | Error::Training(_) | Error::Evaluation(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
