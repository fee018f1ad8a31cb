use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine reports. Each variant maps to a stable
/// kebab-case code that travels over the wire unchanged.
#[derive(Debug, Error)]
pub enum Error {
    // upload channel
    #[error("document is empty")]
    EmptyDocument,
    #[error("document of {size} bytes exceeds the {max}-byte limit")]
    TooLarge { size: u64, max: u64 },
    #[error("unknown course {0}")]
    UnknownCourse(String),
    #[error("unknown upload session {0}")]
    UnknownSession(String),
    #[error("upload session {0} has expired")]
    SessionExpired(String),
    #[error("upload session {0} is no longer open")]
    SessionClosed(String),
    #[error("chunk index {index} outside 0..{total}")]
    BadIndex { index: i64, total: u64 },
    #[error("chunk {index} has {got} bytes, expected {expected}")]
    BadLength { index: u64, expected: u64, got: u64 },
    #[error("chunk {0} failed its hash check")]
    ChunkCorrupt(u64),
    #[error("upload incomplete: {missing} chunks missing")]
    Incomplete { missing: u64 },
    #[error("assembled document does not match the declared hash")]
    ContentCorrupt,
    #[error("chunk size {0} outside the allowed range")]
    BadChunkSize(u64),

    // providers
    #[error("unsupported content type {0}")]
    UnsupportedFormat(String),
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("provider timed out")]
    ProviderTimeout,
    #[error("provider returned a bad response: {0}")]
    ProviderBadResponse(String),

    // lookups
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("unknown paper {0}")]
    UnknownPaper(String),
    #[error("unknown question {0}")]
    UnknownQuestion(String),
    #[error("unknown flag {0}")]
    UnknownFlag(String),
    #[error("unknown user {0}")]
    UnknownUser(String),

    // content store
    #[error("integrity violation: {0}")]
    IntegrityViolation(String),
    #[error("page size {0} exceeds the cap of {1}")]
    PageTooLarge(u32, u32),
    #[error("malformed interchange document: {0}")]
    BadInterchange(String),
    #[error("interchange content failed validation: {0}")]
    InvalidContent(String),

    // engagement and review
    #[error("choice index {0} is out of range")]
    BadChoice(i64),
    #[error("question {0} is not available")]
    NotAvailable(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("flag {0} is already resolved")]
    FlagClosed(String),
    #[error("invalid state transition: {0}")]
    BadState(String),
    #[error("baseline range has no activity")]
    UndefinedBaseline,
    #[error("invalid request: {0}")]
    InvalidRequest(String),

    // sync
    #[error("sync cursor {0} is unknown or expired")]
    CursorExpired(String),

    #[error("configuration error: {0}")]
    Config(String),
    #[error("storage error: {0}")]
    Storage(#[from] rusqlite::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyDocument => "empty-document",
            Error::TooLarge { .. } => "too-large",
            Error::UnknownCourse(_) => "unknown-course",
            Error::UnknownSession(_) => "unknown-session",
            Error::SessionExpired(_) => "session-expired",
            Error::SessionClosed(_) => "session-closed",
            Error::BadIndex { .. } => "bad-index",
            Error::BadLength { .. } => "bad-length",
            Error::ChunkCorrupt(_) => "chunk-corrupt",
            Error::Incomplete { .. } => "incomplete",
            Error::ContentCorrupt => "content-corrupt",
            Error::BadChunkSize(_) => "bad-chunk-size",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::ProviderUnavailable(_) => "provider-unavailable",
            Error::ProviderTimeout => "provider-timeout",
            Error::ProviderBadResponse(_) => "provider-bad-response",
            Error::UnknownDocument(_) => "unknown-document",
            Error::UnknownJob(_) => "unknown-job",
            Error::UnknownPaper(_) => "unknown-paper",
            Error::UnknownQuestion(_) => "unknown-question",
            Error::UnknownFlag(_) => "unknown-flag",
            Error::UnknownUser(_) => "unknown-user",
            Error::IntegrityViolation(_) => "integrity-violation",
            Error::PageTooLarge(..) => "page-too-large",
            Error::BadInterchange(_) => "bad-interchange",
            Error::InvalidContent(_) => "invalid-content",
            Error::BadChoice(_) => "bad-choice",
            Error::NotAvailable(_) => "not-available",
            Error::Forbidden(_) => "forbidden",
            Error::FlagClosed(_) => "flag-closed",
            Error::BadState(_) => "bad-state",
            Error::UndefinedBaseline => "undefined-baseline",
            Error::InvalidRequest(_) => "invalid-request",
            Error::CursorExpired(_) => "cursor-expired",
            Error::Config(_) => "config",
            Error::Storage(_) => "storage",
            Error::Json(_) => "serialization",
            Error::Io(_) => "io",
        }
    }

    /// Transient provider failures are worth another attempt; everything
    /// else is final for the stage that produced it.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::ProviderUnavailable(_) | Error::ProviderTimeout)
    }
}
