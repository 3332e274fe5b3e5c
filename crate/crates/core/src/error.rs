use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {samples} samples, need at least {window}")]
    InputTooShort { samples: usize, window: usize },

    #[error("unsupported sample rate {0} (expected 8000 or 16000)")]
    SampleRate(u32),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated record: {0}")]
    Truncated(String),

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch norm in training mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("language list is empty")]
    NoLanguages,

    #[error("no output head for language `{0}`")]
    MissingHead(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("frame count mismatch: {0}")]
    FrameMismatch(String),

    #[error("no slope-legal warping path through a {rows}x{cols} similarity matrix")]
    NoPath { rows: usize, cols: usize },

    #[error("no target trials")]
    NoTargets,

    #[error("no non-target trials")]
    NoNonTargets,

    #[error("missing label for trial ({0}, {1})")]
    MissingLabel(String, String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::SampleRate(_) => 2,
            Error::Degenerate(_) | Error::NoTargets | Error::NoNonTargets => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
