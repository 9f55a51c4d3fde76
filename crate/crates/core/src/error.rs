use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("schema violation at `{key}`: {detail}")]
    SchemaViolation { key: String, detail: String },

    #[error("unsupported dtype `{0}` (only f32le is accepted)")]
    UnsupportedDtype(String),

    #[error("short read on {}: need {needed} bytes, file has {available}", path.display())]
    ShortRead {
        path: PathBuf,
        needed: u64,
        available: u64,
    },

    #[error("non-finite value in {} at element {index}", path.display())]
    NonFiniteValue { path: PathBuf, index: usize },

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("token {token} has a zero-norm hidden vector")]
    ZeroVector { token: usize },

    #[error("span of {len} tokens is too small for pairwise similarity (need >= 2)")]
    SpanTooSmall { len: usize },

    #[error("cannot aggregate curves of different kinds")]
    MixedKinds,

    #[error("curve length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("curve of length {len} is too short to segment into {target} phases")]
    TooShort { len: usize, target: usize },

    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("k = {k} is out of range 1..={max}")]
    BadK { k: usize, max: usize },

    #[error("caption has no content words")]
    EmptyCaption,

    #[error("dump has no caption")]
    MissingCaption,

    #[error("nothing to plot")]
    EmptySeries,

    #[error("dump {} failed validation: {failures}", path.display())]
    ValidationFailed { path: PathBuf, failures: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    InDump {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_layer(layer: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::AtLayer {
            layer,
            source: Box::new(source),
        }
    }

    pub(crate) fn in_dump(path: impl Into<PathBuf>) -> impl FnOnce(Error) -> Error {
        let path = path.into();
        move |source| Error::InDump {
            path,
            source: Box::new(source),
        }
    }

    /// Strips `AtLayer`/`InDump` annotations.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::AtLayer { source, .. } | Error::InDump { source, .. } => source.root_cause(),
            other => other,
        }
    }
}
