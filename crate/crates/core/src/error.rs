use std::path::PathBuf;

/// Errors surfaced by the pipeline.
///
/// `Config` and `Input` mark caller mistakes (bad run configuration or
/// malformed data) and map to exit code 1 in the CLI; `Io` and `Training`
/// are runtime failures and map to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A run-configuration value is missing, unknown, or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input violates a documented precondition (shape, range, pairing).
    #[error("input error: {0}")]
    Input(String),

    /// An I/O failure with the offending path attached.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training diverged or produced a non-finite quantity.
    #[error("training error: {0}")]
    Training(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Input(_))
    }
}
