use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("index build failed: {0}")]
    IndexBuild(String),

    #[error("embedding contract violated: {0}")]
    Contract(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("measured run {run} failed: {source}")]
    Measurement {
        run: usize,
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

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Wraps the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit status for the CLI: 1 usage, 2 data, 3 transport, 4 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Data(_)
            | Error::InvalidInput(_)
            | Error::UndefinedSimilarity
            | Error::IndexBuild(_) => 2,
            Error::Transport { .. } | Error::Protocol(_) => 3,
            Error::Contract(_) => 4,
            Error::Stage { source, .. } | Error::Measurement { source, .. } => source.exit_code(),
        }
    }
}
