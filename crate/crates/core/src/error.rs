use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("numeric: non-finite value in {op}: {detail}")]
    Numeric { op: String, detail: String },

    #[error("io: {0}")]
    Io(#[from] io::Error),

    #[error("format: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("format: unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("format: truncated file ({0})")]
    Truncated(String),

    #[error("format: crc mismatch (stored {stored:08x}, computed {computed:08x})")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("format: {0}")]
    Format(String),

    #[error("quantizer: all codes are zero, scale cannot be fitted")]
    DegenerateCodes,

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    /// Short machine-readable category used by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Numeric { .. } | Error::DegenerateCodes | Error::Diverged(_) => "numeric",
            Error::Io(_) => "io",
            Error::BadMagic(_) => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated(_) => "truncated",
            Error::CrcMismatch { .. } => "crc_mismatch",
            Error::Format(_) => "format",
        }
    }

    /// Process exit code: 2 config, 3 numeric, 4 I/O and file format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric { .. } | Error::DegenerateCodes | Error::Diverged(_) => 3,
            _ => 4,
        }
    }
}
