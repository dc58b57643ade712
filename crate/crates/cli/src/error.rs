use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Error, Debug)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fbkws_core::Error),
    #[error("config `{}`: {detail}", path.display())]
    Config { path: PathBuf, detail: String },
    /// A request that fails validation before any work starts.
    #[error("{0}")]
    Invalid(String),
    #[error("`{}`: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// 2 for configuration and validation failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        use fbkws_core::Error as E;
        match self {
            CliError::Config { .. } | CliError::Invalid(_) => 2,
            CliError::Core(E::Config(_) | E::Parse(_) | E::Spec(_) | E::Manifest(_)) => 2,
            _ => 1,
        }
    }
}
