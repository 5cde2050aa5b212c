use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Kernel(#[from] tangent_kernels::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
}

impl CliError {
    /// 2 for bad configuration or inputs, 3 for numerical failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        use tangent_kernels::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Kernel(e) if e.is_numerical() => 3,
            CliError::Kernel(E::Io(_)) => 4,
            CliError::Kernel(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Csv { source, .. } if source.is_io_error() => 4,
            CliError::Csv { .. } => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Csv { path, source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
