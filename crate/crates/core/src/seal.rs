//! Sealing of the tree root against a trusted monotonic counter.
//!
//! The sealed record sits with the untrusted files; only the counter file is
//! trusted. A record is accepted when its signature verifies and its counter
//! equals the trusted counter.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use crate::crypto::{HashKey, NodeHash, HASH_LEN};
use crate::error::{Error, Result, RollbackFault};

pub const SEAL_MAGIC: &[u8; 4] = b"PACS";
pub const SEAL_RECORD_LEN: usize = 4 + 8 + HASH_LEN + 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SealedRoot {
    pub root: NodeHash,
    pub counter: u64,
    pub signature: [u8; 32],
}

impl SealedRoot {
    pub fn sign(key: &HashKey, root: NodeHash, counter: u64) -> Self {
        let signature = key.mac(&[&root.0, &counter.to_le_bytes()]);
        Self { root, counter, signature }
    }

    pub fn verify(&self, key: &HashKey) -> bool {
        key.verify_mac(&[&self.root.0, &self.counter.to_le_bytes()], &self.signature)
    }

    pub fn to_bytes(&self) -> [u8; SEAL_RECORD_LEN] {
        let mut out = [0u8; SEAL_RECORD_LEN];
        out[..4].copy_from_slice(SEAL_MAGIC);
        out[4..12].copy_from_slice(&self.counter.to_le_bytes());
        out[12..44].copy_from_slice(&self.root.0);
        out[44..].copy_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(raw: &[u8]) -> std::result::Result<Self, RollbackFault> {
        if raw.len() != SEAL_RECORD_LEN || &raw[..4] != SEAL_MAGIC {
            return Err(RollbackFault::Malformed);
        }
        Ok(Self {
            counter: u64::from_le_bytes(raw[4..12].try_into().unwrap()),
            root: NodeHash(raw[12..44].try_into().unwrap()),
            signature: raw[44..].try_into().unwrap(),
        })
    }
}

/// Monotonic counter persisted in a trusted file (8 bytes, little endian).
pub struct CounterStore {
    path: PathBuf,
    value: u64,
}

impl CounterStore {
    /// Opens the counter, creating it at zero when absent.
    pub fn open(path: &Path) -> Result<Self> {
        let value = match fs::read(path) {
            Ok(raw) => {
                let bytes: [u8; 8] = raw
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::Seal(format!("counter file {} is not 8 bytes", path.display())))?;
                u64::from_le_bytes(bytes)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                write_atomic(path, &0u64.to_le_bytes())?;
                0
            }
            Err(e) => return Err(e.into()),
        };
        Ok(Self { path: path.to_path_buf(), value })
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn increment(&mut self) -> Result<u64> {
        let next = self.value.checked_add(1).ok_or_else(|| Error::Seal("counter exhausted".into()))?;
        write_atomic(&self.path, &next.to_le_bytes())?;
        self.value = next;
        Ok(next)
    }
}

pub struct Sealer {
    key: HashKey,
    record_path: PathBuf,
    counter: CounterStore,
    delay: Duration,
    seals: u64,
}

impl Sealer {
    pub fn new(key: HashKey, record_path: &Path, counter_path: &Path, delay: Duration) -> Result<Self> {
        Ok(Self {
            key,
            record_path: record_path.to_path_buf(),
            counter: CounterStore::open(counter_path)?,
            delay,
            seals: 0,
        })
    }

    pub fn record_path(&self) -> &Path {
        &self.record_path
    }

    pub fn counter(&self) -> u64 {
        self.counter.value()
    }

    /// Seals performed by this instance.
    pub fn seals(&self) -> u64 {
        self.seals
    }

    /// Increments the trusted counter, persists the signed record and takes
    /// at least the configured delay.
    pub fn seal(&mut self, root: NodeHash) -> Result<SealedRoot> {
        let start = Instant::now();
        let counter = self.counter.increment()?;
        let sealed = SealedRoot::sign(&self.key, root, counter);
        write_atomic(&self.record_path, &sealed.to_bytes()).map_err(|e| Error::Seal(e.to_string()))?;
        self.seals += 1;
        if let Some(rest) = self.delay.checked_sub(start.elapsed()) {
            thread::sleep(rest);
        }
        Ok(sealed)
    }

    pub fn load_latest(&self) -> Result<SealedRoot> {
        let raw = fs::read(&self.record_path).map_err(|_| RollbackFault::Malformed)?;
        let sealed = SealedRoot::from_bytes(&raw)?;
        if !sealed.verify(&self.key) {
            return Err(RollbackFault::BadSignature.into());
        }
        if sealed.counter != self.counter.value() {
            return Err(RollbackFault::CounterMismatch { sealed: sealed.counter, trusted: self.counter.value() }.into());
        }
        Ok(sealed)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
