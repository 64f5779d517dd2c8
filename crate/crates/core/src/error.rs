use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch at {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate joint label `{0}`")]
    DuplicateLabel(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("freeze check failed: {0}")]
    Freeze(String),

    #[error("non-finite loss {loss} at timesteps {timesteps:?}; parameter norms: {norms}")]
    NonFiniteLoss {
        loss: f64,
        timesteps: Vec<usize>,
        norms: String,
    },

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad inputs or configuration, as opposed to failures
    /// during compute or I/O. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Shape { .. }
                | Error::Parse { .. }
                | Error::DuplicateLabel(_)
                | Error::MissingFile(_)
                | Error::Dataset(_)
                | Error::Config(_)
                | Error::Freeze(_)
        )
    }
}
