//! Block encryption and keyed node hashing.
//!
//! Blocks are sealed with AES-128-GCM. The block address (8 bytes, little
//! endian) is the associated data, so a tag only verifies at the address it
//! was produced for. Internal tree nodes are HMAC-SHA-256 over the ordered
//! concatenation of the two child hashes.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use aes::cipher::{KeyIvInit, StreamCipher};
use aes_gcm::aead::AeadInPlace;
use aes_gcm::{Aes128Gcm, KeyInit, Nonce, Tag};
use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::Sha256;

use crate::error::{AuthFault, Error, Result};

pub const BLOCK_SIZE: usize = 4096;
pub const MAC_LEN: usize = 16;
pub const IV_LEN: usize = 12;
pub const HASH_LEN: usize = 32;
pub const TAG_LEN: usize = MAC_LEN + IV_LEN;
pub const KEY_FILE_LEN: usize = 16 + 32;

pub type BlockData = [u8; BLOCK_SIZE];

type HmacSha256 = Hmac<Sha256>;
type Aes128Ctr = ctr::Ctr32BE<aes::Aes128>;

/// 128-bit block encryption key.
#[derive(Clone, PartialEq, Eq)]
pub struct BlockKey([u8; 16]);

impl BlockKey {
    pub fn new(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("BlockKey(..)")
    }
}

/// 256-bit key for internal node hashes and sealed-root signatures.
///
/// Holds a prepared HMAC state so each node hash costs a clone instead of a
/// fresh key schedule.
#[derive(Clone)]
pub struct HashKey {
    bytes: [u8; 32],
    prepared: HmacSha256,
}

impl HashKey {
    pub fn new(bytes: [u8; 32]) -> Self {
        let prepared = <HmacSha256 as Mac>::new_from_slice(&bytes).expect("hmac accepts any key length");
        Self { bytes, prepared }
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.bytes
    }

    /// HMAC-SHA-256 over `left ‖ right`.
    pub fn node_hash(&self, left: &NodeHash, right: &NodeHash) -> NodeHash {
        let mut mac = self.prepared.clone();
        mac.update(&left.0);
        mac.update(&right.0);
        NodeHash(mac.finalize().into_bytes().into())
    }

    /// HMAC-SHA-256 over arbitrary parts, concatenated in order.
    pub fn mac(&self, parts: &[&[u8]]) -> [u8; 32] {
        let mut mac = self.prepared.clone();
        for p in parts {
            mac.update(p);
        }
        mac.finalize().into_bytes().into()
    }

    /// Constant-time check of a MAC produced by [`HashKey::mac`].
    pub fn verify_mac(&self, parts: &[&[u8]], expected: &[u8; 32]) -> bool {
        let mut mac = self.prepared.clone();
        for p in parts {
            mac.update(p);
        }
        mac.verify_slice(expected).is_ok()
    }
}

impl PartialEq for HashKey {
    fn eq(&self, other: &Self) -> bool {
        self.bytes == other.bytes
    }
}

impl Eq for HashKey {}

impl fmt::Debug for HashKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("HashKey(..)")
    }
}

/// The pair of secrets every engine needs. Lives only in trusted memory or
/// in the operator-supplied key file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Keys {
    pub block: BlockKey,
    pub hash: HashKey,
}

impl Keys {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_7973);
        let mut raw = [0u8; KEY_FILE_LEN];
        rng.fill_bytes(&mut raw);
        Self::from_bytes(&raw)
    }

    pub fn from_bytes(raw: &[u8; KEY_FILE_LEN]) -> Self {
        let mut block = [0u8; 16];
        let mut hash = [0u8; 32];
        block.copy_from_slice(&raw[..16]);
        hash.copy_from_slice(&raw[16..]);
        Self { block: BlockKey(block), hash: HashKey::new(hash) }
    }

    pub fn to_bytes(&self) -> [u8; KEY_FILE_LEN] {
        let mut raw = [0u8; KEY_FILE_LEN];
        raw[..16].copy_from_slice(&self.block.0);
        raw[16..].copy_from_slice(&self.hash.bytes);
        raw
    }

    /// Reads a raw 48-byte key file: 16-byte block key then 32-byte hash key.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path)?;
        let raw: [u8; KEY_FILE_LEN] = raw.as_slice().try_into().map_err(|_| {
            Error::Config(format!("key file must be {KEY_FILE_LEN} bytes, got {}", raw.len()))
        })?;
        Ok(Self::from_bytes(&raw))
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// 12-byte GCM nonce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Iv(pub [u8; IV_LEN]);

/// Per-block MAC and IV; the leaf-level integrity witness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct BlockAuthTag {
    pub mac: [u8; MAC_LEN],
    pub iv: Iv,
}

impl BlockAuthTag {
    pub fn to_bytes(&self) -> [u8; TAG_LEN] {
        let mut out = [0u8; TAG_LEN];
        out[..MAC_LEN].copy_from_slice(&self.mac);
        out[MAC_LEN..].copy_from_slice(&self.iv.0);
        out
    }

    pub fn from_bytes(raw: &[u8; TAG_LEN]) -> Self {
        let mut mac = [0u8; MAC_LEN];
        let mut iv = [0u8; IV_LEN];
        mac.copy_from_slice(&raw[..MAC_LEN]);
        iv.copy_from_slice(&raw[MAC_LEN..]);
        Self { mac, iv: Iv(iv) }
    }
}

/// 32-byte tree hash.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct NodeHash(pub [u8; HASH_LEN]);

impl NodeHash {
    /// Stands in for an absent child.
    pub const ZERO: NodeHash = NodeHash([0u8; HASH_LEN]);

    /// Leaf digest: the tag bytes, zero padded. The MAC already commits to
    /// the block contents and address.
    pub fn from_tag(tag: &BlockAuthTag) -> Self {
        let mut out = [0u8; HASH_LEN];
        out[..TAG_LEN].copy_from_slice(&tag.to_bytes());
        NodeHash(out)
    }
}

impl fmt::Debug for NodeHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeHash(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

fn aad(addr: u64) -> [u8; 8] {
    addr.to_le_bytes()
}

/// AES-128-GCM with the key schedule expanded once.
#[derive(Clone)]
pub struct BlockCipher {
    gcm: Aes128Gcm,
    key: BlockKey,
}

impl BlockCipher {
    pub fn new(key: &BlockKey) -> Self {
        Self { gcm: Aes128Gcm::new((&key.0).into()), key: key.clone() }
    }

    /// Encrypts `buf` in place and returns the tag bound to `addr`.
    pub fn encrypt_in_place(&self, addr: u64, buf: &mut BlockData, iv: Iv) -> BlockAuthTag {
        let tag = self
            .gcm
            .encrypt_in_place_detached(Nonce::from_slice(&iv.0), &aad(addr), buf)
            .expect("block length is below the GCM limit");
        BlockAuthTag { mac: tag.into(), iv }
    }

    pub fn encrypt_block(&self, addr: u64, plaintext: &BlockData, iv: Iv) -> (Box<BlockData>, BlockAuthTag) {
        let mut out = Box::new(*plaintext);
        let tag = self.encrypt_in_place(addr, &mut out, iv);
        (out, tag)
    }

    /// Verifies and decrypts in place. On failure `buf` is left untouched.
    pub fn decrypt_in_place(&self, addr: u64, buf: &mut BlockData, tag: &BlockAuthTag) -> std::result::Result<(), AuthFault> {
        self.gcm
            .decrypt_in_place_detached(
                Nonce::from_slice(&tag.iv.0),
                &aad(addr),
                buf,
                Tag::from_slice(&tag.mac),
            )
            .map_err(|_| AuthFault { addr })
    }

    pub fn decrypt_block(
        &self,
        addr: u64,
        ciphertext: &BlockData,
        tag: &BlockAuthTag,
    ) -> std::result::Result<Box<BlockData>, AuthFault> {
        let mut out = Box::new(*ciphertext);
        self.decrypt_in_place(addr, &mut out, tag)?;
        Ok(out)
    }

    /// Runs the GCM keystream without checking the tag. Only the batching
    /// baseline uses this, to hand back data whose check is deferred.
    pub fn decrypt_unchecked(&self, buf: &mut BlockData, iv: &Iv) {
        let mut counter = [0u8; 16];
        counter[..IV_LEN].copy_from_slice(&iv.0);
        counter[15] = 2;
        let mut ctr = Aes128Ctr::new((&self.key.0).into(), (&counter).into());
        ctr.apply_keystream(buf);
    }

    /// Raw AEAD over arbitrary lengths; used to check the cipher against
    /// published vectors.
    pub fn seal_raw(&self, iv: &Iv, aad: &[u8], data: &mut Vec<u8>) -> [u8; MAC_LEN] {
        self.gcm
            .encrypt_in_place_detached(Nonce::from_slice(&iv.0), aad, data.as_mut_slice())
            .expect("length within GCM limit")
            .into()
    }
}

/// Issues 12-byte IVs as `prefix ‖ counter`, where the 4-byte prefix is drawn
/// from the run seed and the counter is a 64-bit little-endian sequence.
/// Prefix zero is reserved for the deterministic IVs used when formatting.
pub struct IvSource {
    prefix: [u8; 4],
    counter: u64,
    start: u64,
    audit: Option<HashSet<(u64, Iv)>>,
    duplicates: u64,
}

impl IvSource {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6976_5f73_7263);
        let mut prefix = [0u8; 4];
        while prefix == [0u8; 4] {
            rng.fill_bytes(&mut prefix);
        }
        Self { prefix, counter: 0, start: 0, audit: None, duplicates: 0 }
    }

    /// Source for one engine lifetime. `epoch` must differ between
    /// lifetimes that share a key (the sealed counter is used); the counter
    /// space of each epoch is 2^40 IVs.
    pub fn for_epoch(seed: u64, epoch: u64) -> Self {
        let mut s = Self::new(seed);
        s.counter = epoch << 40;
        s.start = s.counter;
        s
    }

    /// Records every issued (address, IV) pair and counts repeats.
    pub fn with_audit(mut self) -> Self {
        self.audit = Some(HashSet::new());
        self
    }

    pub fn next(&mut self, addr: u64) -> Iv {
        let mut iv = [0u8; IV_LEN];
        iv[..4].copy_from_slice(&self.prefix);
        iv[4..].copy_from_slice(&self.counter.to_le_bytes());
        self.counter = self.counter.wrapping_add(1);
        let iv = Iv(iv);
        if let Some(log) = self.audit.as_mut() {
            if !log.insert((addr, iv)) {
                self.duplicates += 1;
            }
        }
        iv
    }

    pub fn issued(&self) -> u64 {
        self.counter - self.start
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    /// IV used for the all-zero block written at format time.
    pub fn format_iv(addr: u64) -> Iv {
        let mut iv = [0u8; IV_LEN];
        iv[4..].copy_from_slice(&addr.to_le_bytes());
        Iv(iv)
    }
}
