//! Comparison engines sharing the block interface.
//!
//! * [`PlainEngine`] stores plaintext with no protection.
//! * [`AeadEngine`] encrypts and checks the per-block tag only; a replayed
//!   old record verifies.
//! * [`SyncEngine`] verifies and updates the tree inline on every access.
//! * [`BatchEngine`] defers all tree work to a checkpoint taken when its
//!   queue reaches the batch size, returning unverified read data until
//!   then.

use std::fs::OpenOptions;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crypto::{BlockAuthTag, BlockCipher, BlockData, IvSource, BLOCK_SIZE};
use crate::disk::{AdversarialDisk, DiskImage, StoredRecord, RECORD_LEN};
use crate::engine::{check_range, BlockEngine, DeferredFault, EngineKind, EngineMetrics, LatencyHist, WovSample};
use crate::error::{Error, FaultKind, IntegrityFault, Result};
use crate::merkle::{MerkleRoot, MerkleStore};
use crate::pac::subtract;
use crate::seal::{SealedRoot, Sealer};
use crate::storage::{self, EngineConfig, Storage};

pub struct PlainEngine {
    disk: Arc<AdversarialDisk>,
    capacity: u64,
    reads: u64,
    writes: u64,
    fsyncs: u64,
}

impl PlainEngine {
    /// Creates a zero-filled image of plaintext records.
    pub fn create(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&config.dir)?;
        let path = config.image_path();
        {
            let f = OpenOptions::new().write(true).create(true).truncate(true).open(&path)?;
            f.set_len(config.capacity_blocks * RECORD_LEN as u64)?;
        }
        let image = DiskImage::open(&path)?;
        Ok(Self {
            disk: Arc::new(AdversarialDisk::new(image, config.log_depth, config.seed)),
            capacity: config.capacity_blocks,
            reads: 0,
            writes: 0,
            fsyncs: 0,
        })
    }
}

impl BlockEngine for PlainEngine {
    fn kind(&self) -> EngineKind {
        EngineKind::Plain
    }

    fn capacity(&self) -> u64 {
        self.capacity
    }

    fn read(&mut self, addr: u64) -> Result<Box<BlockData>> {
        check_range(addr, self.capacity)?;
        self.reads += 1;
        Ok(self.disk.read(addr)?.data)
    }

    fn write(&mut self, addr: u64, data: &BlockData) -> Result<()> {
        check_range(addr, self.capacity)?;
        self.disk.write(addr, &StoredRecord::new(Box::new(*data), BlockAuthTag::default()))?;
        self.writes += 1;
        Ok(())
    }

    fn fsync(&mut self) -> Result<()> {
        self.disk.flush()?;
        self.fsyncs += 1;
        Ok(())
    }

    fn metrics(&self) -> EngineMetrics {
        EngineMetrics { reads: self.reads, writes: self.writes, fsyncs: self.fsyncs, ..Default::default() }
    }

    fn reset_metrics(&mut self) {
        self.reads = 0;
        self.writes = 0;
        self.fsyncs = 0;
    }

    fn disk(&self) -> &Arc<AdversarialDisk> {
        &self.disk
    }
}

pub struct AeadEngine {
    disk: Arc<AdversarialDisk>,
    cipher: BlockCipher,
    ivs: IvSource,
    capacity: u64,
    reads: u64,
    writes: u64,
    fsyncs: u64,
}

impl AeadEngine {
    pub fn create(config: EngineConfig) -> Result<Self> {
        let Storage { disk, cipher, ivs, .. } = storage::create(&config, false)?;
        Ok(Self { disk, cipher, ivs, capacity: config.capacity_blocks, reads: 0, writes: 0, fsyncs: 0 })
    }

    pub fn iv_duplicates(&self) -> u64 {
        self.ivs.duplicates()
    }
}

impl BlockEngine for AeadEngine {
    fn kind(&self) -> EngineKind {
        EngineKind::Aead
    }

    fn capacity(&self) -> u64 {
        self.capacity
    }

    fn read(&mut self, addr: u64) -> Result<Box<BlockData>> {
        check_range(addr, self.capacity)?;
        let StoredRecord { mut data, tag } = self.disk.read(addr)?;
        self.cipher.decrypt_in_place(addr, &mut data, &tag)?;
        self.reads += 1;
        Ok(data)
    }

    fn write(&mut self, addr: u64, data: &BlockData) -> Result<()> {
        check_range(addr, self.capacity)?;
        let mut buf = Box::new(*data);
        let tag = self.cipher.encrypt_in_place(addr, &mut buf, self.ivs.next(addr));
        self.disk.write(addr, &StoredRecord::new(buf, tag))?;
        self.writes += 1;
        Ok(())
    }

    fn fsync(&mut self) -> Result<()> {
        self.disk.flush()?;
        self.fsyncs += 1;
        Ok(())
    }

    fn metrics(&self) -> EngineMetrics {
        EngineMetrics { reads: self.reads, writes: self.writes, fsyncs: self.fsyncs, ..Default::default() }
    }

    fn reset_metrics(&mut self) {
        self.reads = 0;
        self.writes = 0;
        self.fsyncs = 0;
    }

    fn disk(&self) -> &Arc<AdversarialDisk> {
        &self.disk
    }
}

/// Tree, sealer and instrumentation shared by the synchronous and batching
/// engines.
struct TreeCore {
    store: MerkleStore,
    rng: ChaCha8Rng,
    sealer: Sealer,
    last_seal: SealedRoot,
    meta_path: PathBuf,
    verify_latency: LatencyHist,
    update_latency: LatencyHist,
    updates_applied: u64,
}

impl TreeCore {
    fn from_storage(config: &EngineConfig, st: &mut Storage) -> Self {
        Self {
            store: st.tree.take().expect("authenticated storage has a tree"),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x0073_706c_6179),
            sealer: st.sealer.take().expect("authenticated storage has a sealer"),
            last_seal: st.sealed.take().expect("authenticated storage is sealed"),
            meta_path: config.meta_path(),
            verify_latency: LatencyHist::default(),
            update_latency: LatencyHist::default(),
            updates_applied: 0,
        }
    }

    fn verify(&mut self, addr: u64, tag: &BlockAuthTag) -> Result<()> {
        let t = Instant::now();
        self.store.verify_leaf(addr, tag)?;
        self.verify_latency.record(t.elapsed());
        self.store.maybe_splay(addr, &mut self.rng);
        Ok(())
    }

    fn update(&mut self, addr: u64, tag: BlockAuthTag) -> Result<()> {
        let t = Instant::now();
        self.store.update_leaf(addr, tag)?;
        self.update_latency.record(t.elapsed());
        self.updates_applied += 1;
        self.store.maybe_splay(addr, &mut self.rng);
        Ok(())
    }

    fn checkpoint(&mut self, disk: &AdversarialDisk) -> Result<SealedRoot> {
        disk.flush()?;
        self.store.flush_dirty(&self.meta_path)?;
        self.last_seal = self.sealer.seal(self.store.root().hash)?;
        Ok(self.last_seal)
    }

    fn metrics(&self) -> EngineMetrics {
        EngineMetrics {
            seals: self.sealer.seals(),
            updates_applied: self.updates_applied,
            hash_ops: self.store.hash_ops(),
            cache_hits: self.store.cache().hits(),
            cache_misses: self.store.cache().misses(),
            verify_latency: self.verify_latency.clone(),
            update_latency: self.update_latency.clone(),
            ..Default::default()
        }
    }

    fn clear_latency(&mut self) {
        self.verify_latency.clear();
        self.update_latency.clear();
    }
}

pub struct SyncEngine {
    disk: Arc<AdversarialDisk>,
    cipher: BlockCipher,
    ivs: IvSource,
    core: TreeCore,
    capacity: u64,
    reads: u64,
    writes: u64,
    fsyncs: u64,
    baseline: EngineMetrics,
}

impl SyncEngine {
    pub fn create(config: EngineConfig) -> Result<Self> {
        let st = storage::create(&config, true)?;
        Ok(Self::start(config, st))
    }

    pub fn recover_with_disk(config: EngineConfig, disk: Arc<AdversarialDisk>) -> Result<Self> {
        let st = storage::recover(&config, Some(disk))?;
        Ok(Self::start(config, st))
    }

    fn start(config: EngineConfig, mut st: Storage) -> Self {
        let core = TreeCore::from_storage(&config, &mut st);
        Self {
            disk: st.disk,
            cipher: st.cipher,
            ivs: st.ivs,
            core,
            capacity: config.capacity_blocks,
            reads: 0,
            writes: 0,
            fsyncs: 0,
            baseline: EngineMetrics::default(),
        }
    }

    pub fn root(&self) -> MerkleRoot {
        self.core.store.root()
    }

    pub fn last_seal(&self) -> SealedRoot {
        self.core.last_seal
    }

    pub fn tree(&self) -> &MerkleStore {
        &self.core.store
    }

    pub fn disk_root(&self) -> Result<crate::crypto::NodeHash> {
        let tags = self.disk.read_tags()?;
        Ok(self.core.store.recompute_all(&tags)[self.core.store.root_node() as usize])
    }

    fn raw_metrics(&self) -> EngineMetrics {
        EngineMetrics { reads: self.reads, writes: self.writes, fsyncs: self.fsyncs, ..self.core.metrics() }
    }
}

impl BlockEngine for SyncEngine {
    fn kind(&self) -> EngineKind {
        EngineKind::Sync
    }

    fn capacity(&self) -> u64 {
        self.capacity
    }

    fn read(&mut self, addr: u64) -> Result<Box<BlockData>> {
        check_range(addr, self.capacity)?;
        let StoredRecord { mut data, tag } = self.disk.read(addr)?;
        self.core.verify(addr, &tag)?;
        self.cipher
            .decrypt_in_place(addr, &mut data, &tag)
            .map_err(|_| IntegrityFault::block(addr, FaultKind::Mac))?;
        self.reads += 1;
        Ok(data)
    }

    fn write(&mut self, addr: u64, data: &BlockData) -> Result<()> {
        check_range(addr, self.capacity)?;
        let mut buf = Box::new(*data);
        let tag = self.cipher.encrypt_in_place(addr, &mut buf, self.ivs.next(addr));
        self.disk.write(addr, &StoredRecord::new(buf, tag))?;
        self.core.update(addr, tag)?;
        self.writes += 1;
        Ok(())
    }

    fn fsync(&mut self) -> Result<()> {
        self.core.checkpoint(&self.disk)?;
        self.fsyncs += 1;
        Ok(())
    }

    fn metrics(&self) -> EngineMetrics {
        subtract(self.raw_metrics(), &self.baseline)
    }

    fn reset_metrics(&mut self) {
        self.core.clear_latency();
        self.baseline = self.raw_metrics();
    }

    fn disk(&self) -> &Arc<AdversarialDisk> {
        &self.disk
    }
}

#[derive(Clone, Copy, Debug)]
enum BatchItem {
    Write { addr: u64, tag: BlockAuthTag },
    Read { addr: u64, tag: BlockAuthTag, mac_ok: bool, returned_at: Instant },
}

pub struct BatchEngine {
    disk: Arc<AdversarialDisk>,
    cipher: BlockCipher,
    ivs: IvSource,
    core: TreeCore,
    capacity: u64,
    batch_size: usize,
    queue: Vec<BatchItem>,
    wov: Vec<WovSample>,
    deferred: Vec<DeferredFault>,
    reads: u64,
    writes: u64,
    fsyncs: u64,
    baseline: EngineMetrics,
}

impl BatchEngine {
    pub fn create(config: EngineConfig) -> Result<Self> {
        let mut st = storage::create(&config, true)?;
        let core = TreeCore::from_storage(&config, &mut st);
        Ok(Self {
            disk: st.disk,
            cipher: st.cipher,
            ivs: st.ivs,
            core,
            capacity: config.capacity_blocks,
            batch_size: config.batch_size,
            queue: Vec::with_capacity(config.batch_size),
            wov: Vec::new(),
            deferred: Vec::new(),
            reads: 0,
            writes: 0,
            fsyncs: 0,
            baseline: EngineMetrics::default(),
        })
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn root(&self) -> MerkleRoot {
        self.core.store.root()
    }

    /// Applies and verifies the queue in order. Every read is checked
    /// against the tree as of its position in the queue. Returns the first
    /// fault after processing everything.
    pub fn checkpoint(&mut self) -> Result<()> {
        let items = std::mem::take(&mut self.queue);
        let mut first: Option<Error> = None;
        for item in items {
            match item {
                BatchItem::Write { addr, tag } => self.core.update(addr, tag)?,
                BatchItem::Read { addr, tag, mac_ok, returned_at } => {
                    let outcome = if mac_ok {
                        self.core.verify(addr, &tag).map_err(|e| match e {
                            Error::Integrity(IntegrityFault { kind: FaultKind::Path { depth }, .. }) => {
                                FaultKind::Checkpoint { depth }
                            }
                            _ => FaultKind::Checkpoint { depth: 0 },
                        })
                    } else {
                        Err(FaultKind::Mac)
                    };
                    let verified_at = Instant::now();
                    self.wov.push(WovSample { addr, returned_at, verified_at });
                    if let Err(kind) = outcome {
                        self.deferred.push(DeferredFault { addr, kind, returned_at, detected_at: verified_at });
                        first.get_or_insert(IntegrityFault::block(addr, kind).into());
                    }
                }
            }
        }
        match first {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn push(&mut self, item: BatchItem) -> Result<()> {
        self.queue.push(item);
        if self.queue.len() >= self.batch_size {
            self.checkpoint()?;
        }
        Ok(())
    }

    fn raw_metrics(&self) -> EngineMetrics {
        EngineMetrics {
            reads: self.reads,
            writes: self.writes,
            fsyncs: self.fsyncs,
            wov: self.wov.clone(),
            ..self.core.metrics()
        }
    }
}

impl BlockEngine for BatchEngine {
    fn kind(&self) -> EngineKind {
        EngineKind::Batch
    }

    fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Returns the data without verification; the check happens at the
    /// checkpoint covering this read.
    fn read(&mut self, addr: u64) -> Result<Box<BlockData>> {
        check_range(addr, self.capacity)?;
        let StoredRecord { mut data, tag } = self.disk.read(addr)?;
        let mac_ok = self.cipher.decrypt_in_place(addr, &mut data, &tag).is_ok();
        if !mac_ok {
            self.cipher.decrypt_unchecked(&mut data, &tag.iv);
        }
        self.reads += 1;
        self.push(BatchItem::Read { addr, tag, mac_ok, returned_at: Instant::now() })?;
        Ok(data)
    }

    fn write(&mut self, addr: u64, data: &BlockData) -> Result<()> {
        check_range(addr, self.capacity)?;
        debug_assert_eq!(data.len(), BLOCK_SIZE);
        let mut buf = Box::new(*data);
        let tag = self.cipher.encrypt_in_place(addr, &mut buf, self.ivs.next(addr));
        self.disk.write(addr, &StoredRecord::new(buf, tag))?;
        self.writes += 1;
        self.push(BatchItem::Write { addr, tag })
    }

    fn take_deferred_faults(&mut self) -> Vec<DeferredFault> {
        std::mem::take(&mut self.deferred)
    }

    fn fsync(&mut self) -> Result<()> {
        let result = self.checkpoint();
        self.core.checkpoint(&self.disk)?;
        self.fsyncs += 1;
        result
    }

    fn metrics(&self) -> EngineMetrics {
        let mut m = subtract(self.raw_metrics(), &self.baseline);
        m.wov.drain(..self.baseline.wov.len().min(m.wov.len()));
        m
    }

    fn reset_metrics(&mut self) {
        self.core.clear_latency();
        self.wov.clear();
        self.baseline = self.raw_metrics();
    }

    fn disk(&self) -> &Arc<AdversarialDisk> {
        &self.disk
    }
}

/// Builds the engine named by `kind`.
pub fn build_engine(kind: EngineKind, config: EngineConfig) -> Result<Box<dyn BlockEngine>> {
    Ok(match kind {
        EngineKind::Plain => Box::new(PlainEngine::create(config)?),
        EngineKind::Aead => Box::new(AeadEngine::create(config)?),
        EngineKind::Sync => Box::new(SyncEngine::create(config)?),
        EngineKind::Batch => Box::new(BatchEngine::create(config)?),
        EngineKind::Pac => Box::new(crate::pac::PacEngine::create(config)?),
    })
}

/// Reopens an engine after a crash, reusing `disk` and its snapshots.
/// Only the tree-backed engines with a sealed root support recovery.
pub fn recover_engine(kind: EngineKind, config: EngineConfig, disk: Arc<AdversarialDisk>) -> Result<Box<dyn BlockEngine>> {
    Ok(match kind {
        EngineKind::Sync => Box::new(SyncEngine::recover_with_disk(config, disk)?),
        EngineKind::Pac => Box::new(crate::pac::PacEngine::recover_with_disk(config, disk)?),
        other => return Err(Error::Config(format!("the {other} engine does not support recovery"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disk::AttackAction;
    use crate::merkle::TreeKind;
    use crate::storage::Background;
    use rand::Rng;

    fn config(dir: &std::path::Path, cap: u64) -> EngineConfig {
        let mut c = EngineConfig::new(dir, cap);
        c.seal_delay = std::time::Duration::ZERO;
        c.background = Background::Manual;
        c.log_depth = 2;
        c.tree_kind = TreeKind::Balanced;
        c
    }

    fn block(b: u8) -> BlockData {
        [b; BLOCK_SIZE]
    }

    #[test]
    fn roundtrip_every_engine() {
        for kind in EngineKind::ALL {
            let d = tempfile::tempdir().unwrap();
            let mut e = build_engine(kind, config(d.path(), 16)).unwrap();
            assert_eq!(&e.read(3).unwrap()[..], &block(0)[..], "{kind}");
            e.write(3, &block(7)).unwrap();
            assert_eq!(&e.read(3).unwrap()[..], &block(7)[..], "{kind}");
            e.fsync().unwrap();
            assert_eq!(&e.read(3).unwrap()[..], &block(7)[..], "{kind}");
        }
    }

    #[test]
    fn engines_agree_without_attacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ops: Vec<(bool, u64, u8)> = (0..400).map(|_| (rng.gen_bool(0.4), rng.gen_range(0..16), rng.gen())).collect();
        let mut outputs = Vec::new();
        for kind in EngineKind::ALL {
            let d = tempfile::tempdir().unwrap();
            let mut c = config(d.path(), 16);
            c.batch_size = 7;
            let mut e = build_engine(kind, c).unwrap();
            let mut out = Vec::new();
            for (i, &(is_read, addr, fill)) in ops.iter().enumerate() {
                if is_read {
                    out.push(e.read(addr).unwrap()[0]);
                } else {
                    e.write(addr, &block(fill)).unwrap();
                }
                if i % 50 == 49 {
                    e.fsync().unwrap();
                }
            }
            outputs.push(out);
        }
        for o in &outputs[1..] {
            assert_eq!(o, &outputs[0]);
        }
    }

    #[test]
    fn aead_detects_corruption_not_replay() {
        let d = tempfile::tempdir().unwrap();
        let mut e = AeadEngine::create(config(d.path(), 8)).unwrap();
        e.write(2, &block(1)).unwrap();
        e.write(2, &block(2)).unwrap();
        e.disk().arm(AttackAction::Corrupt { addr: 2 }).unwrap();
        assert!(matches!(e.read(2), Err(Error::Auth(_))));
        e.disk().arm(AttackAction::Replay { addr: 2, steps_back: 1 }).unwrap();
        assert_eq!(&e.read(2).unwrap()[..], &block(1)[..]);
        e.disk().arm(AttackAction::Swap { a: 2, b: 3 }).unwrap();
        assert!(matches!(e.read(2), Err(Error::Auth(_))));
    }

    #[test]
    fn sync_detects_replay_inline_and_matches_oracle() {
        let d = tempfile::tempdir().unwrap();
        let mut e = SyncEngine::create(config(d.path(), 16)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = rng.gen_range(0..16);
            if rng.gen_bool(0.5) {
                e.write(a, &block(rng.gen())).unwrap();
            } else {
                e.read(a).unwrap();
            }
        }
        assert_eq!(e.disk_root().unwrap(), e.root().hash);
        e.write(5, &block(1)).unwrap();
        e.write(5, &block(2)).unwrap();
        e.disk().arm(AttackAction::Replay { addr: 5, steps_back: 1 }).unwrap();
        assert!(matches!(e.read(5), Err(Error::Integrity(_))));
    }

    #[test]
    fn batch_returns_stale_then_flags_at_checkpoint() {
        let d = tempfile::tempdir().unwrap();
        let mut c = config(d.path(), 16);
        c.batch_size = 100;
        let mut e = BatchEngine::create(c).unwrap();
        e.write(5, &block(1)).unwrap();
        e.fsync().unwrap();
        e.write(5, &block(2)).unwrap();
        e.fsync().unwrap();
        e.disk().arm(AttackAction::Replay { addr: 5, steps_back: 1 }).unwrap();
        assert_eq!(&e.read(5).unwrap()[..], &block(1)[..]);
        assert!(e.take_deferred_faults().is_empty());
        let err = e.fsync().unwrap_err();
        assert!(matches!(err, Error::Integrity(IntegrityFault { kind: FaultKind::Checkpoint { .. }, .. })));
        let faults = e.take_deferred_faults();
        assert_eq!(faults.len(), 1);
        assert!(faults[0].detected_at > faults[0].returned_at);
    }

    #[test]
    fn batch_flags_corruption_and_swap() {
        let d = tempfile::tempdir().unwrap();
        let mut c = config(d.path(), 16);
        c.batch_size = 100;
        let mut e = BatchEngine::create(c).unwrap();
        e.write(1, &block(1)).unwrap();
        e.disk().arm(AttackAction::Corrupt { addr: 1 }).unwrap();
        e.read(1).unwrap();
        e.disk().arm(AttackAction::Swap { a: 2, b: 1 }).unwrap();
        e.read(2).unwrap();
        assert!(e.checkpoint().is_err());
        assert_eq!(e.take_deferred_faults().len(), 2);
    }

    #[test]
    fn batch_size_one_verifies_before_return() {
        let d = tempfile::tempdir().unwrap();
        let mut c = config(d.path(), 16);
        c.batch_size = 1;
        let mut e = BatchEngine::create(c).unwrap();
        e.write(5, &block(1)).unwrap();
        e.write(5, &block(2)).unwrap();
        for _ in 0..20 {
            e.read(5).unwrap();
        }
        e.disk().arm(AttackAction::Replay { addr: 5, steps_back: 1 }).unwrap();
        assert!(e.read(5).is_err());
        let m = e.metrics();
        assert_eq!(m.wov.len(), 21);
        assert!(m.mean_wov() < std::time::Duration::from_millis(1));
    }

    #[test]
    fn plain_attack_goes_unnoticed() {
        let d = tempfile::tempdir().unwrap();
        let mut e = PlainEngine::create(config(d.path(), 8)).unwrap();
        e.write(0, &block(4)).unwrap();
        e.disk().arm(AttackAction::Corrupt { addr: 0 }).unwrap();
        assert!(e.read(0).is_ok());
    }
}
