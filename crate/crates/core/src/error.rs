use thiserror::Error;

use crate::transport::TransportError;
use crate::types::Gfi;
use crate::wire::ErrorCode;

/// Errors surfaced by the file-system stack (storage, caches, manager,
/// client facade).
#[derive(Debug, Error)]
pub enum Error {
    #[error("no such path: {0}")]
    NotFound(String),
    #[error("path exists: {0}")]
    AlreadyExists(String),
    #[error("unknown file {0}")]
    UnknownGfi(Gfi),
    #[error("block of {0} bytes is not one page")]
    BadBlockSize(usize),
    #[error("storage: {0}")]
    Storage(String),
    #[error("lease unavailable for {0}")]
    LeaseUnavailable(Gfi),
    #[error("lease manager unreachable")]
    ManagerUnreachable,
    #[error("revocation failed for {0}")]
    RevokeFailed(Gfi),
    #[error("flush failed: {0}")]
    FlushFailed(String),
    #[error("revocation of {gfi} gave up after {retries} optimistic passes")]
    RevokeLivelock { gfi: Gfi, retries: u32 },
    #[error("operation not valid in this cache mode")]
    ModeMismatch,
    #[error("bad file handle {0}")]
    BadHandle(u64),
    #[error("write of {len} bytes at page offset {offset} crosses the page")]
    BadRange { offset: usize, len: usize },
    #[error("thread cancelled by the deadlock watchdog")]
    DeadlockAborted,
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wire code used when this error crosses an RPC boundary.
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::NotFound(_) => ErrorCode::NotFound,
            Error::AlreadyExists(_) => ErrorCode::AlreadyExists,
            Error::UnknownGfi(_) => ErrorCode::UnknownGfi,
            Error::BadBlockSize(_) => ErrorCode::BadBlockSize,
            Error::RevokeFailed(_) => ErrorCode::RevokeFailed,
            Error::BadRange { .. } | Error::Protocol(_) => ErrorCode::BadRequest,
            _ => ErrorCode::Internal,
        }
    }

    /// Rebuilds an error from an `Error` reply. `gfi` fills in the file for
    /// codes whose message alone does not carry it.
    pub fn from_remote(code: ErrorCode, message: String, gfi: Option<Gfi>) -> Self {
        match (code, gfi) {
            (ErrorCode::NotFound, _) => Error::NotFound(message),
            (ErrorCode::AlreadyExists, _) => Error::AlreadyExists(message),
            (ErrorCode::UnknownGfi, Some(g)) => Error::UnknownGfi(g),
            (ErrorCode::RevokeFailed, Some(g)) => Error::RevokeFailed(g),
            (ErrorCode::BadBlockSize, _) => Error::BadBlockSize(message.parse().unwrap_or(0)),
            _ => Error::Storage(format!("{code:?}: {message}")),
        }
    }

    pub fn is_unreachable(&self) -> bool {
        matches!(
            self,
            Error::ManagerUnreachable
                | Error::Transport(TransportError::Unreachable)
                | Error::Transport(TransportError::Closed)
                | Error::Transport(TransportError::Timeout)
                | Error::Transport(TransportError::Io(_))
        )
    }
}
