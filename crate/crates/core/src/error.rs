use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the engine can report, across all modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("shared memory failure: {0}")]
    Resource(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt handle: {0}")]
    CorruptHandle(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("writer failed: {0}")]
    Writer(String),
    #[error("channel empty")]
    Empty,
    #[error("unknown label: {0}")]
    Label(String),
    #[error("lease already consumed")]
    UseAfterConsume,
    #[error("corrupt card: {0}")]
    CorruptCard(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("backend failed: {0}")]
    Backend(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable short code used in control-protocol replies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::AlreadyExists(_) => "AlreadyExists",
            Error::Resource(_) => "ResourceError",
            Error::NotFound(_) => "NotFound",
            Error::CorruptHandle(_) => "CorruptHandle",
            Error::Shape(_) => "ShapeError",
            Error::Config(_) => "ConfigError",
            Error::Writer(_) => "WriterError",
            Error::Empty => "Empty",
            Error::Label(_) => "LabelError",
            Error::UseAfterConsume => "UseAfterConsume",
            Error::CorruptCard(_) => "CorruptCard",
            Error::Protocol(_) => "ProtocolError",
            Error::Startup(_) => "StartupError",
            Error::Backend(_) => "BackendError",
            Error::Io(_) => "IoError",
        }
    }
}
