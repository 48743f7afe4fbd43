use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("ingest: {0}")]
    Ingest(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Model(#[from] mziln::Error),
}

impl CliError {
    /// 2 for data that cannot support a fit, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use mziln::Error as E;
        match self {
            CliError::Model(
                E::EmptySystem | E::DegenerateSample | E::NoSignal | E::RankDeficient { .. },
            ) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
