use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] segmap_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        use segmap_core::Error as C;
        match self {
            Error::Core(C::Shape(_)) => "shape",
            Error::Core(C::FrameMismatch { .. }) => "frame_mismatch",
            Error::Core(C::Config(_)) => "config",
            Error::Core(C::Domain(_)) => "domain",
            Error::Core(C::OutOfRange { .. }) => "out_of_range",
            Error::Core(C::DegenerateGeometry(_)) => "degenerate_geometry",
            Error::Core(C::NonFinite { .. }) => "non_finite",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Incompatible(_) => "checkpoint",
            Error::Usage(_) => "usage",
        }
    }

    /// One line: `error kind=<kind> msg="<message>"`.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace('\n', "; ");
        format!("error kind={} msg={}", self.kind(), serde_json::Value::String(msg))
    }
}
