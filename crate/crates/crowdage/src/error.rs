use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}:{line}: {source}", path.display())]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: {message}", path.display())]
    ConfigFile { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("{}: output directory is not empty (pass --force to overwrite)", .0.display())]
    OutputExists(PathBuf),

    #[error("{0}")]
    Mismatch(String),

    #[error(transparent)]
    Core(#[from] crowdage_core::Error),
}

impl Error {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Problems the user can fix by changing flags or the config file.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::ConfigFile { .. }
                | Error::Config(_)
                | Error::OutputExists(_)
                | Error::Core(crowdage_core::Error::Config(_))
        )
    }
}
