//! The partially asynchronous engine.
//!
//! Reads are verified before they return: a block with a pending update is
//! checked against the queued tag, any other block against the tree. Writes
//! encrypt, store and enqueue a tree update, returning without touching the
//! tree. A background context applies queued updates at a bounded rate,
//! draining at full speed when the queue fills or an fsync is waiting. An
//! fsync returns once the queue is empty, the data and metadata are flushed
//! and the root is sealed.
//!
//! Lock order is tree, then queue. The reader holds the queue lock only long
//! enough to look up a pending update.

use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crypto::{BlockCipher, BlockData, IvSource};
use crate::disk::{AdversarialDisk, StoredRecord};
use crate::engine::{check_range, BlockEngine, EngineKind, EngineMetrics, LatencyHist, MemoryReport};
use crate::error::{Error, FaultKind, IntegrityFault, Result};
use crate::merkle::{MerkleRoot, MerkleStore, TREE_NODE_BYTES};
use crate::queue::{Push, QueueState, TokenBucket, UpdateQueue, REQUEST_FOOTPRINT_BYTES};
use crate::seal::{SealedRoot, Sealer};
use crate::storage::{self, Background, EngineConfig, Storage};

/// Updates applied per tree-lock hold while draining, so readers interleave.
const APPLY_CHUNK: usize = 64;
/// Tokens the rate limiter may bank.
const BURST_WINDOW: Duration = Duration::from_millis(10);

struct TreeSide {
    store: MerkleStore,
    rng: ChaCha8Rng,
    sealer: Sealer,
    last_seal: SealedRoot,
    verify_latency: LatencyHist,
    update_latency: LatencyHist,
    updates_applied: u64,
}

struct QueueSide {
    queue: UpdateQueue,
    bucket: TokenBucket,
    stalls: u64,
    queued_reads: u64,
    flush_requested: u64,
    flush_completed: u64,
    stop: bool,
    fault: Option<String>,
    async_alerts: u64,
}

struct Shared {
    disk: Arc<AdversarialDisk>,
    tree: Mutex<TreeSide>,
    queue: Mutex<QueueSide>,
    not_full: Condvar,
    work: Condvar,
    flushed: Condvar,
    meta_path: std::path::PathBuf,
    poll_interval: Duration,
}

#[derive(Clone, Copy, Debug)]
struct Plan {
    count: usize,
    flush: Option<u64>,
}

impl Shared {
    fn plan(&self, qs: &mut QueueSide, now: Instant) -> Plan {
        qs.bucket.refill(now);
        if qs.flush_requested > qs.flush_completed {
            return Plan { count: usize::MAX, flush: Some(qs.flush_requested) };
        }
        let count = if qs.queue.state() == QueueState::Draining {
            qs.queue.len() - qs.queue.low_mark()
        } else {
            let n = qs.bucket.available().min(qs.queue.len());
            qs.bucket.take(n);
            n
        };
        Plan { count, flush: None }
    }

    /// Applies up to `count` queued updates in queue order.
    fn apply(&self, count: usize) -> Result<usize> {
        let mut done = 0;
        while done < count {
            let mut tree = self.tree.lock();
            let mut chunk = 0;
            while chunk < APPLY_CHUNK && done < count {
                let req = {
                    let mut qs = self.queue.lock();
                    let r = qs.queue.pop_front();
                    if r.is_some() {
                        self.not_full.notify_all();
                    }
                    r
                };
                let Some(req) = req else { return Ok(done) };
                let t = Instant::now();
                tree.store.update_leaf(req.addr, req.new_tag)?;
                let elapsed = t.elapsed();
                tree.update_latency.record(elapsed);
                tree.updates_applied += 1;
                let TreeSide { store, rng, .. } = &mut *tree;
                store.maybe_splay(req.addr, rng);
                done += 1;
                chunk += 1;
            }
        }
        Ok(done)
    }

    /// Flushes data and metadata, then seals the current root. The queue
    /// must be empty.
    fn checkpoint(&self) -> Result<SealedRoot> {
        let mut tree = self.tree.lock();
        debug_assert!(self.queue.lock().queue.is_empty());
        self.disk.flush()?;
        tree.store.flush_dirty(&self.meta_path)?;
        let root = tree.store.root().hash;
        let sealed = tree.sealer.seal(root)?;
        tree.last_seal = sealed;
        Ok(sealed)
    }

    /// Drains everything and checkpoints; loops if work arrived meanwhile.
    fn drain_and_checkpoint(&self) -> Result<SealedRoot> {
        loop {
            self.apply(usize::MAX)?;
            if self.queue.lock().queue.is_empty() {
                return self.checkpoint();
            }
        }
    }

    fn latch(&self, err: &Error) {
        let mut qs = self.queue.lock();
        if qs.fault.is_none() {
            qs.fault = Some(err.to_string());
        }
        qs.async_alerts += 1;
        self.not_full.notify_all();
        self.flushed.notify_all();
    }

    fn run(self: Arc<Self>) {
        loop {
            self.disk.background_gate();
            let plan = {
                let mut qs = self.queue.lock();
                if qs.stop {
                    return;
                }
                let plan = self.plan(&mut qs, Instant::now());
                if qs.fault.is_some() || (plan.count == 0 && plan.flush.is_none()) {
                    let wait = if qs.queue.is_empty() || qs.fault.is_some() {
                        self.poll_interval
                    } else {
                        qs.bucket.until_next().clamp(Duration::from_micros(50), self.poll_interval)
                    };
                    self.work.wait_for(&mut qs, wait);
                    continue;
                }
                plan
            };
            let result = match plan.flush {
                Some(target) => self.drain_and_checkpoint().map(|_| {
                    let mut qs = self.queue.lock();
                    qs.flush_completed = qs.flush_completed.max(target);
                    self.flushed.notify_all();
                }),
                None => self.apply(plan.count).map(|_| ()),
            };
            if let Err(e) = result {
                self.latch(&e);
            }
        }
    }
}

pub struct PacEngine {
    shared: Arc<Shared>,
    worker: Option<JoinHandle<()>>,
    cipher: BlockCipher,
    ivs: IvSource,
    capacity: u64,
    manual: bool,
    reads: u64,
    writes: u64,
    fsyncs: u64,
    baseline: EngineMetrics,
}

impl PacEngine {
    /// Formats a fresh image in `config.dir` and starts the engine.
    pub fn create(config: EngineConfig) -> Result<Self> {
        let st = storage::create(&config, true)?;
        Ok(Self::start(config, st))
    }

    /// Reopens `config.dir` after a crash; see [`storage`] for the checks.
    pub fn recover(config: EngineConfig) -> Result<Self> {
        let st = storage::recover(&config, None)?;
        Ok(Self::start(config, st))
    }

    /// Recovery reusing an existing disk handle, keeping its snapshots.
    pub fn recover_with_disk(config: EngineConfig, disk: Arc<AdversarialDisk>) -> Result<Self> {
        let st = storage::recover(&config, Some(disk))?;
        Ok(Self::start(config, st))
    }

    fn start(config: EngineConfig, st: Storage) -> Self {
        let Storage { disk, cipher, ivs, tree, sealer, sealed } = st;
        let store = tree.expect("authenticated storage has a tree");
        let shared = Arc::new(Shared {
            disk,
            tree: Mutex::new(TreeSide {
                store,
                rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x0073_706c_6179),
                sealer: sealer.expect("authenticated storage has a sealer"),
                last_seal: sealed.expect("authenticated storage is sealed"),
                verify_latency: LatencyHist::default(),
                update_latency: LatencyHist::default(),
                updates_applied: 0,
            }),
            queue: Mutex::new(QueueSide {
                queue: UpdateQueue::new(config.queue_capacity, config.low_watermark),
                bucket: TokenBucket::new(config.bg_rate, BURST_WINDOW, Instant::now()),
                stalls: 0,
                queued_reads: 0,
                flush_requested: 0,
                flush_completed: 0,
                stop: false,
                fault: None,
                async_alerts: 0,
            }),
            not_full: Condvar::new(),
            work: Condvar::new(),
            flushed: Condvar::new(),
            meta_path: config.meta_path(),
            poll_interval: config.poll_interval,
        });
        let manual = config.background == Background::Manual;
        let worker = (!manual).then(|| {
            let s = shared.clone();
            thread::Builder::new().name("pac-background".into()).spawn(move || s.run()).expect("spawn background thread")
        });
        Self {
            shared,
            worker,
            cipher,
            ivs,
            capacity: config.capacity_blocks,
            manual,
            reads: 0,
            writes: 0,
            fsyncs: 0,
            baseline: EngineMetrics::default(),
        }
    }

    fn check_fault(&self) -> Result<()> {
        match &self.shared.queue.lock().fault {
            Some(msg) => Err(Error::Halted(msg.clone())),
            None => Ok(()),
        }
    }

    /// Reads and verifies one block.
    pub fn pac_read(&mut self, addr: u64) -> Result<Box<BlockData>> {
        check_range(addr, self.capacity)?;
        self.check_fault()?;
        let StoredRecord { mut data, tag } = self.shared.disk.read(addr)?;
        let pending = {
            let mut qs = self.shared.queue.lock();
            let pending = qs.queue.get(addr).map(|r| r.new_tag);
            if pending.is_some() {
                qs.queued_reads += 1;
            }
            pending
        };
        match pending {
            Some(queued) => {
                if queued != tag {
                    return Err(IntegrityFault::block(addr, FaultKind::QueuedTag).into());
                }
            }
            None => {
                let mut tree = self.shared.tree.lock();
                let t = Instant::now();
                tree.store.verify_leaf(addr, &tag)?;
                let elapsed = t.elapsed();
                tree.verify_latency.record(elapsed);
                let TreeSide { store, rng, .. } = &mut *tree;
                store.maybe_splay(addr, rng);
            }
        }
        self.cipher
            .decrypt_in_place(addr, &mut data, &tag)
            .map_err(|_| IntegrityFault::block(addr, FaultKind::Mac))?;
        self.reads += 1;
        Ok(data)
    }

    /// Encrypts and stores one block and queues its tree update. Blocks
    /// while the queue is full.
    pub fn pac_write(&mut self, addr: u64, data: &BlockData) -> Result<()> {
        check_range(addr, self.capacity)?;
        self.check_fault()?;
        let iv = self.ivs.next(addr);
        let mut buf = Box::new(*data);
        let tag = self.cipher.encrypt_in_place(addr, &mut buf, iv);
        self.shared.disk.write(addr, &StoredRecord::new(buf, tag))?;
        let mut qs = self.shared.queue.lock();
        let mut stalled = false;
        loop {
            if let Some(msg) = &qs.fault {
                return Err(Error::Halted(msg.clone()));
            }
            match qs.queue.push(addr, tag, Instant::now()) {
                Push::Inserted | Push::Overridden => break,
                Push::Full => {
                    if !stalled {
                        qs.stalls += 1;
                        stalled = true;
                    }
                    if self.manual {
                        // No background thread: drain to the low mark inline.
                        let n = qs.queue.len() - qs.queue.low_mark();
                        drop(qs);
                        self.shared.apply(n).inspect_err(|e| self.shared.latch(e))?;
                        qs = self.shared.queue.lock();
                        continue;
                    }
                    self.shared.work.notify_one();
                    self.shared.not_full.wait(&mut qs);
                }
            }
        }
        if qs.queue.state() == QueueState::Draining {
            self.shared.work.notify_one();
        }
        drop(qs);
        self.writes += 1;
        Ok(())
    }

    /// Waits for the queue to drain, flushes and seals.
    pub fn pac_fsync(&mut self) -> Result<SealedRoot> {
        self.check_fault()?;
        let sealed = if self.manual {
            self.shared.drain_and_checkpoint().inspect_err(|e| self.shared.latch(e))?
        } else {
            let mut qs = self.shared.queue.lock();
            qs.flush_requested += 1;
            let target = qs.flush_requested;
            self.shared.work.notify_one();
            while qs.flush_completed < target {
                if let Some(msg) = &qs.fault {
                    return Err(Error::Halted(msg.clone()));
                }
                self.shared.flushed.wait(&mut qs);
            }
            drop(qs);
            self.shared.tree.lock().last_seal
        };
        self.fsyncs += 1;
        Ok(sealed)
    }

    /// One poll of the background processor. Only valid in manual mode.
    pub fn background_step(&mut self, now: Instant) -> Result<usize> {
        if !self.manual {
            return Err(Error::Config("background_step needs manual background mode".into()));
        }
        self.check_fault()?;
        let plan = {
            let mut qs = self.shared.queue.lock();
            self.shared.plan(&mut qs, now)
        };
        let n = self.shared.apply(plan.count).inspect_err(|e| self.shared.latch(e))?;
        Ok(n)
    }

    pub fn queue_len(&self) -> usize {
        self.shared.queue.lock().queue.len()
    }

    pub fn queue_state(&self) -> QueueState {
        self.shared.queue.lock().queue.state()
    }

    /// Pending updates in queue order as (address, supersede count).
    pub fn pending(&self) -> Vec<(u64, u32)> {
        self.shared.queue.lock().queue.iter().map(|r| (r.addr, r.supersede_count)).collect()
    }

    pub fn check_queue(&self) -> std::result::Result<(), String> {
        self.shared.queue.lock().queue.check_invariants()
    }

    pub fn root(&self) -> MerkleRoot {
        self.shared.tree.lock().store.root()
    }

    pub fn last_seal(&self) -> SealedRoot {
        self.shared.tree.lock().last_seal
    }

    pub fn sealed_counter(&self) -> u64 {
        self.shared.tree.lock().sealer.counter()
    }

    /// Node hashes computed by the tree so far.
    pub fn tree_hash_ops(&self) -> u64 {
        self.shared.tree.lock().store.hash_ops()
    }

    /// Root recomputed bottom-up from the tags currently on disk.
    pub fn disk_root(&self) -> Result<crate::crypto::NodeHash> {
        let tags = self.shared.disk.read_tags()?;
        let tree = self.shared.tree.lock();
        Ok(tree.store.recompute_all(&tags)[tree.store.root_node() as usize])
    }

    /// Runs `f` on the trusted tree under the tree lock.
    pub fn with_tree<R>(&self, f: impl FnOnce(&MerkleStore) -> R) -> R {
        f(&self.shared.tree.lock().store)
    }

    /// Every cached hash equals the stored node hash.
    pub fn audit_cache(&self) -> bool {
        self.shared.tree.lock().store.audit_cache()
    }

    pub fn fault(&self) -> Option<String> {
        self.shared.queue.lock().fault.clone()
    }

    pub fn iv_duplicates(&self) -> u64 {
        self.ivs.duplicates()
    }

    pub fn memory_report(&self) -> MemoryReport {
        let tree = self.shared.tree.lock();
        let qcap = self.shared.queue.lock().queue.capacity();
        let cache_entries = tree.store.cache().capacity();
        MemoryReport {
            per_request_bytes: REQUEST_FOOTPRINT_BYTES,
            queue_capacity: qcap,
            queue_bytes: qcap * REQUEST_FOOTPRINT_BYTES,
            cache_entries,
            cache_bytes: cache_entries * (crate::crypto::HASH_LEN + 8),
            tree_nodes: tree.store.node_count(),
            tree_bytes: tree.store.node_count() * TREE_NODE_BYTES,
        }
    }

    fn raw_metrics(&self) -> EngineMetrics {
        let tree = self.shared.tree.lock();
        let qs = self.shared.queue.lock();
        EngineMetrics {
            reads: self.reads,
            writes: self.writes,
            fsyncs: self.fsyncs,
            seals: tree.sealer.seals(),
            overrides: qs.queue.overrides(),
            stalls: qs.stalls,
            drains: qs.queue.drains(),
            updates_applied: tree.updates_applied,
            queued_reads: qs.queued_reads,
            async_alerts: qs.async_alerts,
            hash_ops: tree.store.hash_ops(),
            cache_hits: tree.store.cache().hits(),
            cache_misses: tree.store.cache().misses(),
            verify_latency: tree.verify_latency.clone(),
            update_latency: tree.update_latency.clone(),
            wov: Vec::new(),
        }
    }
}

pub(crate) fn subtract(now: EngineMetrics, base: &EngineMetrics) -> EngineMetrics {
    EngineMetrics {
        reads: now.reads - base.reads,
        writes: now.writes - base.writes,
        fsyncs: now.fsyncs - base.fsyncs,
        seals: now.seals - base.seals,
        overrides: now.overrides - base.overrides,
        stalls: now.stalls - base.stalls,
        drains: now.drains - base.drains,
        updates_applied: now.updates_applied - base.updates_applied,
        queued_reads: now.queued_reads - base.queued_reads,
        async_alerts: now.async_alerts - base.async_alerts,
        hash_ops: now.hash_ops - base.hash_ops,
        cache_hits: now.cache_hits - base.cache_hits,
        cache_misses: now.cache_misses - base.cache_misses,
        ..now
    }
}

impl BlockEngine for PacEngine {
    fn kind(&self) -> EngineKind {
        EngineKind::Pac
    }

    fn capacity(&self) -> u64 {
        self.capacity
    }

    fn read(&mut self, addr: u64) -> Result<Box<BlockData>> {
        self.pac_read(addr)
    }

    fn write(&mut self, addr: u64, data: &BlockData) -> Result<()> {
        self.pac_write(addr, data)
    }

    fn fsync(&mut self) -> Result<()> {
        self.pac_fsync().map(|_| ())
    }

    fn metrics(&self) -> EngineMetrics {
        subtract(self.raw_metrics(), &self.baseline)
    }

    fn reset_metrics(&mut self) {
        {
            let mut tree = self.shared.tree.lock();
            tree.verify_latency.clear();
            tree.update_latency.clear();
        }
        self.baseline = self.raw_metrics();
    }

    fn disk(&self) -> &Arc<AdversarialDisk> {
        &self.shared.disk
    }
}

impl Drop for PacEngine {
    /// Stops the background thread without draining: pending updates are
    /// lost, as in a crash.
    fn drop(&mut self) {
        self.shared.queue.lock().stop = true;
        self.shared.work.notify_all();
        self.shared.disk.disarm_all();
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
    }
}
