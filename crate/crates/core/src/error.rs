use std::path::PathBuf;

use gradcore::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{op}: volume aligned to the {actual} view, expected {expected}")]
    Alignment {
        op: &'static str,
        expected: crate::medvol::View,
        actual: crate::medvol::View,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{path}:{line}: {msg}")]
    SplitLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0}")]
    Image(#[from] image::ImageError),

    #[error("{0}")]
    Csv(#[from] csv::Error),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {msg}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Invalid {
        op,
        msg: msg.into(),
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
