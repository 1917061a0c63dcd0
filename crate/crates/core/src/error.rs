use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate part: {0}")]
    DegeneratePart(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated input while reading {0}")]
    Truncated(&'static str),

    #[error("hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("cannot estimate distance statistics: {0}")]
    CannotEstimate(String),

    #[error("degenerate distance statistics: d_l = d_h = {0}")]
    DegenerateStats(f64),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("part {part_id}: {source}")]
    Part {
        part_id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("empty warehouse index")]
    EmptyIndex,

    #[error("unknown part {0}")]
    UnknownPart(u64),

    #[error("rejected choice: {0}")]
    RejectedChoice(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category, used for exit codes and API errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) | Error::DegeneratePart(_) => "invalid-input",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::Contract(_) => "contract-violation",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::Truncated(_) => {
                "parse"
            }
            Error::HashMismatch { .. } => "hash-mismatch",
            Error::CannotEstimate(_) | Error::DegenerateStats(_) => "statistics",
            Error::Diverged { .. } => "diverged",
            Error::Part { source, .. } => source.category(),
            Error::EmptyIndex => "empty-index",
            Error::UnknownPart(_) => "not-found",
            Error::RejectedChoice(_) => "rejected",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn for_part(self, part_id: u64) -> Error {
        Error::Part {
            part_id,
            source: Box::new(self),
        }
    }
}
