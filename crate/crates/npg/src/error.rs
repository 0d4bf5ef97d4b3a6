use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad or incomplete configuration; `field` is the dotted key path.
    #[error("usage error at `{field}`: {message}")]
    Usage { field: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(#[from] npg_core::Error),

    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn usage(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Usage {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Process exit status: 2 usage, 3 numerical abort, 4 file errors.
    /// Failed assertions exit with 1 and are not errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage { .. } => 2,
            Self::Numerical(_) => 3,
            Self::Io { .. } => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
