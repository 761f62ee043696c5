use thiserror::Error;

/// Checkpoint files fail in structurally different ways; callers match on these.
#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic: expected \"SMT1\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    VersionSkew { found: u32, supported: u32 },
    #[error("checkpoint truncated while reading {section}")]
    Truncated { section: &'static str },
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite activation in {what} at encoder layer {layer}")]
    NonFinite { what: &'static str, layer: usize },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGrad { param: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("polar night: clear-sky maximum is zero on {date}")]
    PolarNight { date: String },

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: invalid image: {msg}")]
    ImageFormat { path: String, msg: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
