use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("stream for reader {reader} has zero variance")]
    ZeroVariance { reader: usize },

    #[error("frame is already normalized")]
    AlreadyNormalized,

    #[error("window length {d_in} exceeds sector length {len}")]
    WindowTooLong { d_in: usize, len: usize },

    #[error("target raw BER {target} unreachable: bracket yields [{low}, {high}]")]
    Unreachable { target: f64, low: f64, high: f64 },

    #[error("log of non-positive value {0}")]
    LogDomain(f64),

    #[error("reference index {index} needs {needed} bits of history")]
    IndexUnderflow { index: usize, needed: usize },

    #[error("block of {len} bits is too long for exhaustive search (max {max})")]
    BlockTooLong { len: usize, max: usize },

    #[error("block of {len} samples is shorter than the target length {min}")]
    BlockTooShort { len: usize, min: usize },

    #[error("soft decision bookkeeping does not match the supplied samples")]
    StaleBookkeeping,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset hashes differ: {0} vs {1}")]
    DatasetMismatch(String, String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing data: {}", .0.display())]
    MissingData(PathBuf),

    #[error("malformed archive {}: {reason}", path.display())]
    Archive { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
