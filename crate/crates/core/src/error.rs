use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlatError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate vector: norm {norm:e} is below {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("degenerate transform: {0}")]
    DegenerateTransform(String),

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("degenerate prototype for class {class}: mean feature norm {norm:e}")]
    DegeneratePrototype { class: usize, norm: f64 },

    #[error("state error: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("episode {index}: {source}")]
    Episode {
        index: usize,
        #[source]
        source: Box<FlatError>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FlatError {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        FlatError::Config { field: field.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlatError::Io { path: path.into(), source }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        FlatError::Checkpoint { path: path.into(), msg: msg.into() }
    }

    /// Process exit code: 1 config, 2 data, 3 runtime or numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            FlatError::Config { .. } => 1,
            FlatError::Data(_) | FlatError::Io { .. } | FlatError::Checkpoint { .. } => 2,
            FlatError::Episode { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
