use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] calid::Error),

    #[error("{path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 1 for anything the caller can fix by changing inputs, 2 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config { .. } | Self::Usage(_) => 1,
            Self::Core(e) => match e {
                calid::Error::Invalid(_) | calid::Error::Shape { .. } | calid::Error::Parse { .. } => 1,
                _ => 2,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
