use std::path::PathBuf;

use thiserror::Error;

use crate::music::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid corpus: {}", format_invalid(.0))]
    InvalidPieces(Vec<(String, Vec<Violation>)>),

    #[error("invalid duration {num}/{den}: {reason}")]
    Duration { num: i64, den: i64, reason: &'static str },

    #[error("duration denominator would exceed the cap of {cap}")]
    DenominatorCap { cap: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("not enough data: {0}")]
    TooSmall(String),

    #[error("meter mismatch: {0}")]
    Meter(String),

    #[error("unsupported archive version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("archive kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

fn format_invalid(pieces: &[(String, Vec<Violation>)]) -> String {
    let mut out = Vec::new();
    for (id, violations) in pieces {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        out.push(format!("piece {id}: {}", list.join("; ")));
    }
    out.join(" | ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by inputs the operator controls.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Shape(_))
    }
}
