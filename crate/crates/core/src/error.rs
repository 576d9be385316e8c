use thiserror::Error;

/// Errors shared across the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid configuration: {msg}")]
    Config { op: &'static str, msg: String },

    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("{op}: contract violated: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Config {
            op,
            msg: msg.into(),
        }
    }

    pub fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
