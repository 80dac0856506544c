use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot decimate {from_hz} Hz to {to_hz} Hz: rates are not integer-related")]
    NonIntegerDecimation { from_hz: f64, to_hz: f64 },
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },
    #[error("need at least {needed} participants, got {got}")]
    TooFewParticipants { needed: usize, got: usize },
    #[error("window of {len} timesteps is shorter than the encoder receptive field ({needed})")]
    WindowTooShort { len: usize, needed: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sequence of {frames} frames is too short for contrastive prediction")]
    SequenceTooShort { frames: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("series of length {len} cannot be split into {segments} equal segments")]
    NonDivisibleLength { len: usize, segments: usize },
    #[error("empty token corpus")]
    EmptyCorpus,
    #[error("vocabulary mismatch: expected hash {expected:016x}, got {got:016x}")]
    VocabMismatch { expected: u64, got: u64 },
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {}{}", .path.display(), .hint.as_deref().map(|h| format!(" ({h})")).unwrap_or_default())]
    MissingInput { path: PathBuf, hint: Option<String> },
    #[error("unsupported {what} version {found} (expected {expected})")]
    SchemaVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn missing(path: impl Into<PathBuf>, hint: impl Into<String>) -> Self {
        Error::MissingInput {
            path: path.into(),
            hint: Some(hint.into()),
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
