use std::path::{Path, PathBuf};

/// Failures grouped by the process exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Training(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<robex::Error> for CliError {
    fn from(e: robex::Error) -> Self {
        use robex::Error as E;
        match e {
            E::Config(_) | E::Input(_) | E::Undefined(_) => CliError::Config(e.to_string()),
            E::Training { .. } | E::Attack { .. } => CliError::Training(e.to_string()),
            E::Io { .. } | E::Image { .. } | E::Format(_) | E::Json(_) => {
                CliError::Io(e.to_string())
            }
        }
    }
}
