use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: axis {axis} is empty or out of range for shape {shape:?}")]
    EmptyAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } | Error::EmptyAxis { .. } => 2,
            Error::Checkpoint(CheckpointError::ConfigMismatch { .. }) => 2,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } => 3,
            Error::NonFinite(_) | Error::Autodiff(_) => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: malformed PGM: {reason}")]
    MalformedPgm { path: PathBuf, reason: String },

    #[error("{dir}: frame numbering has a gap, frame index {missing} is missing")]
    MissingFrame { dir: PathBuf, missing: usize },

    #[error("{dir}: no frames found")]
    NoFrames { dir: PathBuf },

    #[error("{path}: label for frame index {index} is outside the clip")]
    LabelOutOfRange { path: PathBuf, index: usize },

    #[error("{path}: bad label row: {reason}")]
    BadLabel { path: PathBuf, reason: String },

    #[error("frame {index} has shape {found:?}, expected {expected:?}")]
    FrameShape {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("training splits cannot contain anomalies")]
    AnomalyInTrainingSpec,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("clip {video_id} has {len} frames, a window needs {needed}")]
    ClipTooShort {
        video_id: String,
        len: usize,
        needed: usize,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, not a checkpoint")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("truncated checkpoint at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },

    #[error("checkpoint config mismatch on `{key}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        key: String,
        found: String,
        expected: String,
    },
}
