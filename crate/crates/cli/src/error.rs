use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    ConfigFile {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Core(#[from] wxnet_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 0 success, 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        use wxnet_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::ConfigFile { .. } => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::Contract(_) | E::Dimension(_) => 1,
                E::Ingestion(_) | E::Format(_) | E::Io(_) => 2,
                E::Numerical(_) | E::DegenerateReference | E::InfiniteScore => 3,
            },
        }
    }
}
