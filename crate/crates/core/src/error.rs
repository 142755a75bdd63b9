use std::fmt;
use std::io;

use thiserror::Error;

/// AEAD tag verification failed for a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("authentication tag rejected for block {addr}")]
pub struct AuthFault {
    pub addr: u64,
}

/// Why an integrity check rejected a block or a recovered image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// The block's AEAD tag did not verify against the fetched ciphertext.
    Mac,
    /// The fetched tag differs from the tag held by the pending update.
    QueuedTag,
    /// The authentication path diverged from a trusted hash at this depth
    /// (0 is the leaf).
    Path { depth: u32 },
    /// A deferred verification failed at checkpoint time.
    Checkpoint { depth: u32 },
    /// Root recomputed during recovery does not match the sealed root.
    RecoveredRoot,
    /// A stored metadata hash disagrees with its recomputed value.
    StoredNode { node: u64 },
    /// A leaf tag in metadata disagrees with the tag stored next to the block.
    StoredTag { addr: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub struct IntegrityFault {
    pub addr: Option<u64>,
    pub kind: FaultKind,
}

impl IntegrityFault {
    pub fn block(addr: u64, kind: FaultKind) -> Self {
        Self { addr: Some(addr), kind }
    }

    pub fn global(kind: FaultKind) -> Self {
        Self { addr: None, kind }
    }
}

impl fmt::Display for IntegrityFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.addr {
            Some(addr) => write!(f, "integrity check failed for block {addr}: {:?}", self.kind),
            None => write!(f, "integrity check failed: {:?}", self.kind),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RollbackFault {
    #[error("sealed counter {sealed} does not match trusted counter {trusted}")]
    CounterMismatch { sealed: u64, trusted: u64 },
    #[error("sealed record signature does not verify")]
    BadSignature,
    #[error("sealed record is missing or malformed")]
    Malformed,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Auth(#[from] AuthFault),
    #[error(transparent)]
    Integrity(#[from] IntegrityFault),
    #[error("rollback detected: {0}")]
    Rollback(#[from] RollbackFault),
    #[error("metadata corrupt: {0}")]
    MetadataCorrupt(String),
    #[error("disk fault: {0}")]
    Disk(#[from] io::Error),
    #[error("seal failed: {0}")]
    Seal(String),
    #[error("engine halted after an earlier fault: {0}")]
    Halted(String),
    #[error("block {addr} out of range (capacity {capacity})")]
    OutOfRange { addr: u64, capacity: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown snapshot token {0}")]
    UnknownToken(u64),
}

impl Error {
    /// True for every error that signals tampering rather than an
    /// operational problem.
    pub fn is_violation(&self) -> bool {
        matches!(
            self,
            Error::Auth(_) | Error::Integrity(_) | Error::Rollback(_) | Error::MetadataCorrupt(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
