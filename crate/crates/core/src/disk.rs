//! File-backed block device and the adversarial wrapper around it.
//!
//! Each block occupies one 4124-byte record: ciphertext, then MAC, then IV.
//! [`AdversarialDisk`] forwards to a [`DiskImage`] and can be armed with
//! [`AttackAction`]s that rewrite responses, drop writes, roll state back or
//! stall the background processor. It also takes crash snapshots.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto::{BlockAuthTag, BlockCipher, BlockData, IvSource, BLOCK_SIZE, MAC_LEN, TAG_LEN};
use crate::error::{Error, Result};
use crate::par;

pub const RECORD_LEN: usize = BLOCK_SIZE + TAG_LEN;

/// Records formatted per parallel chunk.
const FORMAT_CHUNK: usize = 256;

#[derive(Clone, PartialEq, Eq)]
pub struct StoredRecord {
    pub data: Box<BlockData>,
    pub tag: BlockAuthTag,
}

impl std::fmt::Debug for StoredRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StoredRecord").field("tag", &self.tag).finish_non_exhaustive()
    }
}

impl StoredRecord {
    pub fn new(data: Box<BlockData>, tag: BlockAuthTag) -> Self {
        Self { data, tag }
    }

    fn to_bytes(&self, out: &mut [u8]) {
        out[..BLOCK_SIZE].copy_from_slice(&self.data[..]);
        out[BLOCK_SIZE..].copy_from_slice(&self.tag.to_bytes());
    }

    fn from_bytes(raw: &[u8]) -> Self {
        let mut data = Box::new([0u8; BLOCK_SIZE]);
        data.copy_from_slice(&raw[..BLOCK_SIZE]);
        let tag = BlockAuthTag::from_bytes(raw[BLOCK_SIZE..RECORD_LEN].try_into().unwrap());
        Self { data, tag }
    }
}

pub struct DiskImage {
    path: PathBuf,
    file: File,
    capacity: u64,
}

impl DiskImage {
    /// Creates (or truncates) an image and fills it with the encrypted
    /// all-zero block at every address.
    pub fn format(path: &Path, capacity: u64, cipher: &BlockCipher) -> Result<Self> {
        Ok(Self::format_with_tags(path, capacity, cipher)?.0)
    }

    /// As [`DiskImage::format`], also returning every record's tag.
    pub fn format_with_tags(path: &Path, capacity: u64, cipher: &BlockCipher) -> Result<(Self, Vec<BlockAuthTag>)> {
        if capacity == 0 {
            return Err(Error::Config("capacity must be at least one block".into()));
        }
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(path)?;
        file.set_len(capacity * RECORD_LEN as u64)?;
        let chunk_blocks = FORMAT_CHUNK.min(capacity as usize);
        let mut buf = vec![0u8; chunk_blocks * RECORD_LEN];
        let mut tags = Vec::with_capacity(capacity as usize);
        let mut base = 0u64;
        while base < capacity {
            let n = chunk_blocks.min((capacity - base) as usize);
            let slice = &mut buf[..n * RECORD_LEN];
            par::for_each_chunk_mut(slice, RECORD_LEN, |i, rec| {
                let addr = base + i as u64;
                let (block, tag) = cipher.encrypt_block(addr, &[0u8; BLOCK_SIZE], IvSource::format_iv(addr));
                StoredRecord { data: block, tag }.to_bytes(rec);
            });
            for rec in slice.chunks(RECORD_LEN) {
                tags.push(BlockAuthTag::from_bytes(rec[BLOCK_SIZE..].try_into().unwrap()));
            }
            file.write_all_at(slice, base * RECORD_LEN as u64)?;
            base += n as u64;
        }
        file.sync_all()?;
        Ok((Self { path: path.to_path_buf(), file, capacity }, tags))
    }

    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len();
        if len == 0 || len % RECORD_LEN as u64 != 0 {
            return Err(Error::Disk(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("image length {len} is not a whole number of records"),
            )));
        }
        Ok(Self { path: path.to_path_buf(), file, capacity: len / RECORD_LEN as u64 })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    fn check(&self, addr: u64) -> Result<()> {
        if addr >= self.capacity {
            return Err(Error::OutOfRange { addr, capacity: self.capacity });
        }
        Ok(())
    }

    pub fn read(&self, addr: u64) -> Result<StoredRecord> {
        self.check(addr)?;
        let mut raw = [0u8; RECORD_LEN];
        self.file.read_exact_at(&mut raw, addr * RECORD_LEN as u64)?;
        Ok(StoredRecord::from_bytes(&raw))
    }

    pub fn write(&self, addr: u64, record: &StoredRecord) -> Result<()> {
        self.check(addr)?;
        let mut raw = [0u8; RECORD_LEN];
        record.to_bytes(&mut raw);
        self.file.write_all_at(&raw, addr * RECORD_LEN as u64)?;
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        self.file.sync_data()?;
        Ok(())
    }

    /// Reads the tag of every record, in address order.
    pub fn read_tags(&self) -> Result<Vec<BlockAuthTag>> {
        const SPAN: usize = 1024;
        let mut tags = Vec::with_capacity(self.capacity as usize);
        let mut buf = vec![0u8; SPAN * RECORD_LEN];
        let mut base = 0u64;
        while base < self.capacity {
            let n = SPAN.min((self.capacity - base) as usize);
            self.file.read_exact_at(&mut buf[..n * RECORD_LEN], base * RECORD_LEN as u64)?;
            for rec in buf[..n * RECORD_LEN].chunks(RECORD_LEN) {
                tags.push(BlockAuthTag::from_bytes(rec[BLOCK_SIZE..].try_into().unwrap()));
            }
            base += n as u64;
        }
        Ok(tags)
    }

    fn copy_to(&self, dst: &Path) -> Result<()> {
        let mut src = &self.file;
        src.seek(SeekFrom::Start(0))?;
        let mut out = File::create(dst)?;
        io::copy(&mut src, &mut out)?;
        Ok(())
    }

    fn copy_from(&self, src: &Path) -> Result<()> {
        let mut input = File::open(src)?;
        let mut dst = &self.file;
        dst.seek(SeekFrom::Start(0))?;
        io::copy(&mut input, &mut dst)?;
        self.file.set_len(self.capacity * RECORD_LEN as u64)?;
        self.file.sync_data()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackAction {
    /// Serve the record written `steps_back` writes before the latest one.
    Replay { addr: u64, steps_back: u32 },
    /// Serve the current record with one bit flipped.
    Corrupt { addr: u64 },
    /// Serve `b`'s record for a read of `a`.
    Swap { a: u64, b: u64 },
    /// Acknowledge the next write without performing it.
    DropWrite { addr: u64 },
    /// Roll every logged address back by `steps_back` writes.
    RollbackAll { steps_back: u32 },
    /// Hold the background processor's next poll. `None` holds it until
    /// [`AdversarialDisk::disarm_all`].
    DelayBackground { duration: Option<Duration> },
}

impl AttackAction {
    pub fn addr(&self) -> Option<u64> {
        match self {
            AttackAction::Replay { addr, .. } | AttackAction::Corrupt { addr } | AttackAction::DropWrite { addr } => {
                Some(*addr)
            }
            AttackAction::Swap { a, .. } => Some(*a),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackAction::Replay { .. } => "replay",
            AttackAction::Corrupt { .. } => "corrupt",
            AttackAction::Swap { .. } => "swap",
            AttackAction::DropWrite { .. } => "drop_write",
            AttackAction::RollbackAll { .. } => "rollback_all",
            AttackAction::DelayBackground { .. } => "delay_background",
        }
    }
}

/// Bounded per-address history of written records.
#[derive(Clone, Default)]
pub struct VersionLog {
    depth: usize,
    history: HashMap<u64, VecDeque<StoredRecord>>,
}

impl VersionLog {
    pub fn new(depth: usize) -> Self {
        Self { depth, history: HashMap::new() }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn is_enabled(&self) -> bool {
        self.depth > 0
    }

    fn has(&self, addr: u64) -> bool {
        self.history.contains_key(&addr)
    }

    /// Number of past versions available for replay at `addr`.
    pub fn available(&self, addr: u64) -> usize {
        self.history.get(&addr).map_or(0, |r| (r.len().saturating_sub(1)).min(self.depth))
    }

    /// Appends `record`; the latest entry is the current on-disk version.
    pub fn push(&mut self, addr: u64, record: StoredRecord) {
        let ring = self.history.entry(addr).or_default();
        ring.push_back(record);
        while ring.len() > self.depth + 1 {
            ring.pop_front();
        }
    }

    /// The record `steps_back` writes before the latest.
    pub fn get(&self, addr: u64, steps_back: u32) -> Option<&StoredRecord> {
        let ring = self.history.get(&addr)?;
        let k = steps_back as usize;
        if k == 0 || k > self.depth || k >= ring.len() {
            return None;
        }
        ring.get(ring.len() - 1 - k)
    }

    pub fn addresses(&self) -> impl Iterator<Item = u64> + '_ {
        self.history.keys().copied()
    }
}

#[derive(Clone, Debug)]
struct Armed {
    action: AttackAction,
    persistent: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttackStats {
    pub armed: u64,
    pub fired: u64,
}

struct AttackState {
    armed: Vec<Armed>,
    log: VersionLog,
    rng: ChaCha8Rng,
    stats: AttackStats,
}

struct Gate {
    /// `Some(None)`: held until lifted. `Some(Some(t))`: held until `t`.
    hold: Option<Option<Instant>>,
    pending: Option<Option<Duration>>,
}

struct Snapshot {
    image: PathBuf,
    log: VersionLog,
    sidecars: Vec<(PathBuf, Option<Vec<u8>>)>,
}

pub struct AdversarialDisk {
    image: DiskImage,
    active: AtomicBool,
    state: Mutex<AttackState>,
    gate: Mutex<Gate>,
    gate_cv: Condvar,
    sidecars: Mutex<Vec<PathBuf>>,
    snapshots: Mutex<HashMap<u64, Snapshot>>,
    snapshot_dir: PathBuf,
    next_token: AtomicU64,
}

impl AdversarialDisk {
    pub fn new(image: DiskImage, log_depth: usize, seed: u64) -> Self {
        let mut snapshot_dir = image.path().as_os_str().to_owned();
        snapshot_dir.push(".snapshots");
        Self {
            image,
            active: AtomicBool::new(log_depth > 0),
            state: Mutex::new(AttackState {
                armed: Vec::new(),
                log: VersionLog::new(log_depth),
                rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6164_7673),
                stats: AttackStats::default(),
            }),
            gate: Mutex::new(Gate { hold: None, pending: None }),
            gate_cv: Condvar::new(),
            sidecars: Mutex::new(Vec::new()),
            snapshots: Mutex::new(HashMap::new()),
            snapshot_dir: snapshot_dir.into(),
            next_token: AtomicU64::new(1),
        }
    }

    pub fn image(&self) -> &DiskImage {
        &self.image
    }

    pub fn capacity(&self) -> u64 {
        self.image.capacity()
    }

    pub fn log_depth(&self) -> usize {
        self.state.lock().log.depth()
    }

    /// Past versions of `addr` that a replay could serve.
    pub fn replayable(&self, addr: u64) -> usize {
        self.state.lock().log.available(addr)
    }

    pub fn stats(&self) -> AttackStats {
        self.state.lock().stats
    }

    fn refresh_active(&self, st: &AttackState) {
        self.active.store(!st.armed.is_empty() || st.log.is_enabled(), Ordering::Release);
    }

    pub fn arm(&self, action: AttackAction) -> Result<()> {
        self.arm_with(action, false)
    }

    pub fn arm_persistent(&self, action: AttackAction) -> Result<()> {
        self.arm_with(action, true)
    }

    fn arm_with(&self, action: AttackAction, persistent: bool) -> Result<()> {
        let cap = self.capacity();
        let in_range = |a: u64| {
            if a >= cap {
                Err(Error::OutOfRange { addr: a, capacity: cap })
            } else {
                Ok(())
            }
        };
        let mut st = self.state.lock();
        match action {
            AttackAction::Replay { addr, steps_back } => {
                in_range(addr)?;
                if steps_back == 0 || steps_back as usize > st.log.depth() {
                    return Err(Error::Config(format!(
                        "replay depth {steps_back} outside 1..={}",
                        st.log.depth()
                    )));
                }
            }
            AttackAction::RollbackAll { steps_back } => {
                if steps_back == 0 || steps_back as usize > st.log.depth() {
                    return Err(Error::Config(format!(
                        "rollback depth {steps_back} outside 1..={}",
                        st.log.depth()
                    )));
                }
            }
            AttackAction::Corrupt { addr } | AttackAction::DropWrite { addr } => in_range(addr)?,
            AttackAction::Swap { a, b } => {
                in_range(a)?;
                in_range(b)?;
            }
            AttackAction::DelayBackground { duration } => {
                st.stats.armed += 1;
                drop(st);
                self.gate.lock().pending = Some(duration);
                return Ok(());
            }
        }
        st.armed.push(Armed { action, persistent });
        st.stats.armed += 1;
        self.refresh_active(&st);
        Ok(())
    }

    /// Removes every armed action and lifts any background hold.
    pub fn disarm_all(&self) {
        let mut st = self.state.lock();
        st.armed.clear();
        self.refresh_active(&st);
        drop(st);
        let mut g = self.gate.lock();
        g.hold = None;
        g.pending = None;
        self.gate_cv.notify_all();
    }

    pub fn armed_count(&self) -> usize {
        self.state.lock().armed.len()
    }

    pub fn read(&self, addr: u64) -> Result<StoredRecord> {
        if !self.active.load(Ordering::Acquire) {
            return self.image.read(addr);
        }
        let mut st = self.state.lock();
        if let Some(i) = st.armed.iter().position(|a| matches!(a.action, AttackAction::RollbackAll { .. })) {
            let AttackAction::RollbackAll { steps_back } = st.armed[i].action else { unreachable!() };
            self.rollback_logged(&mut st, steps_back)?;
            self.consume(&mut st, i);
        }
        let mut record = self.image.read(addr)?;
        let hit = st.armed.iter().position(|a| match a.action {
            AttackAction::Replay { addr: x, steps_back } => x == addr && st.log.get(addr, steps_back).is_some(),
            AttackAction::Corrupt { addr: x } => x == addr,
            AttackAction::Swap { a, .. } => a == addr,
            _ => false,
        });
        if let Some(i) = hit {
            match st.armed[i].action {
                AttackAction::Replay { steps_back, .. } => {
                    record = st.log.get(addr, steps_back).cloned().expect("checked above");
                }
                AttackAction::Corrupt { .. } => {
                    let byte = st.rng.gen_range(0..RECORD_LEN);
                    let bit = st.rng.gen_range(0..8);
                    flip_bit(&mut record, byte, bit);
                }
                AttackAction::Swap { b, .. } => {
                    record = self.image.read(b)?;
                }
                _ => unreachable!(),
            }
            self.consume(&mut st, i);
        }
        Ok(record)
    }

    fn consume(&self, st: &mut AttackState, i: usize) {
        st.stats.fired += 1;
        if !st.armed[i].persistent {
            st.armed.remove(i);
            self.refresh_active(st);
        }
    }

    fn rollback_logged(&self, st: &mut AttackState, steps_back: u32) -> Result<()> {
        let addrs: Vec<u64> = st.log.addresses().collect();
        for addr in addrs {
            if let Some(old) = st.log.get(addr, steps_back).cloned() {
                self.image.write(addr, &old)?;
                st.log.push(addr, old);
            }
        }
        Ok(())
    }

    pub fn write(&self, addr: u64, record: &StoredRecord) -> Result<()> {
        if !self.active.load(Ordering::Acquire) {
            return self.image.write(addr, record);
        }
        let mut st = self.state.lock();
        if let Some(i) = st.armed.iter().position(|a| a.action == AttackAction::DropWrite { addr }) {
            self.consume(&mut st, i);
            return Ok(());
        }
        if st.log.is_enabled() {
            if !st.log.has(addr) {
                let before = self.image.read(addr)?;
                st.log.push(addr, before);
            }
            st.log.push(addr, record.clone());
        }
        self.image.write(addr, record)
    }

    pub fn flush(&self) -> Result<()> {
        self.image.flush()
    }

    pub fn read_tags(&self) -> Result<Vec<BlockAuthTag>> {
        self.image.read_tags()
    }

    /// Called by the background processor before each poll. Blocks while a
    /// delay is armed.
    pub fn background_gate(&self) {
        let mut g = self.gate.lock();
        if let Some(d) = g.pending.take() {
            g.hold = Some(d.map(|d| Instant::now() + d));
        }
        loop {
            match g.hold {
                None => return,
                Some(None) => {
                    self.gate_cv.wait(&mut g);
                }
                Some(Some(until)) => {
                    if Instant::now() >= until {
                        g.hold = None;
                        return;
                    }
                    self.gate_cv.wait_until(&mut g, until);
                }
            }
        }
    }

    /// True while a background delay is armed or holding.
    pub fn background_held(&self) -> bool {
        let g = self.gate.lock();
        g.pending.is_some() || g.hold.is_some()
    }

    /// Registers a file that belongs to the untrusted state and is captured
    /// by snapshots along with the image.
    pub fn attach_sidecar(&self, path: &Path) {
        let mut s = self.sidecars.lock();
        if !s.iter().any(|p| p == path) {
            s.push(path.to_path_buf());
        }
    }

    pub fn crash_snapshot(&self) -> Result<u64> {
        let token = self.next_token.fetch_add(1, Ordering::Relaxed);
        fs::create_dir_all(&self.snapshot_dir)?;
        let image = self.snapshot_dir.join(format!("{token}.img"));
        self.image.copy_to(&image)?;
        let sidecars = self
            .sidecars
            .lock()
            .iter()
            .map(|p| (p.clone(), fs::read(p).ok()))
            .collect();
        let log = self.state.lock().log.clone();
        self.snapshots.lock().insert(token, Snapshot { image, log, sidecars });
        Ok(token)
    }

    /// Returns image, version log and sidecar files to the snapshot.
    pub fn crash_restore(&self, token: u64) -> Result<()> {
        self.restore(token, true)
    }

    /// Returns only the image and version log to the snapshot.
    pub fn restore_image_only(&self, token: u64) -> Result<()> {
        self.restore(token, false)
    }

    fn restore(&self, token: u64, sidecars: bool) -> Result<()> {
        let snaps = self.snapshots.lock();
        let snap = snaps.get(&token).ok_or(Error::UnknownToken(token))?;
        let mut st = self.state.lock();
        self.image.copy_from(&snap.image)?;
        st.log = snap.log.clone();
        if sidecars {
            for (path, content) in &snap.sidecars {
                match content {
                    Some(bytes) => write_durable(path, bytes)?,
                    None => match fs::remove_file(path) {
                        Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                        _ => {}
                    },
                }
            }
        }
        Ok(())
    }

    pub fn release_snapshot(&self, token: u64) -> Result<()> {
        let snap = self.snapshots.lock().remove(&token).ok_or(Error::UnknownToken(token))?;
        let _ = fs::remove_file(snap.image);
        Ok(())
    }
}

impl Drop for AdversarialDisk {
    fn drop(&mut self) {
        let snaps = std::mem::take(&mut *self.snapshots.lock());
        for (_, s) in snaps {
            let _ = fs::remove_file(s.image);
        }
        let _ = fs::remove_dir(&self.snapshot_dir);
    }
}

fn flip_bit(record: &mut StoredRecord, byte: usize, bit: u32) {
    let mask = 1u8 << bit;
    if byte < BLOCK_SIZE {
        record.data[byte] ^= mask;
    } else if byte < BLOCK_SIZE + MAC_LEN {
        record.tag.mac[byte - BLOCK_SIZE] ^= mask;
    } else {
        record.tag.iv.0[byte - BLOCK_SIZE - MAC_LEN] ^= mask;
    }
}

pub(crate) fn write_durable(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(bytes)?;
    f.sync_data()?;
    Ok(())
}

/// One line of an attack script.
#[derive(Clone, Debug, PartialEq)]
pub enum ScriptEntry {
    /// Arm `action`, optionally at a given operation index of the workload.
    Arm { at_op: Option<u64>, action: AttackAction, persistent: bool },
    /// Inject `count` randomly placed attacks drawn from `kinds`.
    Random { count: u64, kinds: Vec<String> },
}

/// Parses a line-oriented attack script: one action per line, an optional
/// `@N` prefix naming the operation index, an optional trailing
/// `persistent`, and `#` comments.
pub fn parse_attack_script(text: &str) -> Result<Vec<ScriptEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut words: Vec<&str> = line.split_whitespace().collect();
        let mut at_op = None;
        if let Some(w) = words.first().and_then(|w| w.strip_prefix('@')) {
            at_op = Some(w.parse::<u64>().map_err(|_| err(format!("bad op index `{w}`")))?);
            words.remove(0);
        }
        let persistent = words.last() == Some(&"persistent");
        if persistent {
            words.pop();
        }
        let (name, args) = words.split_first().ok_or_else(|| err("missing action".into()))?;
        let num = |k: usize| -> Result<u64> {
            let w = args.get(k).ok_or_else(|| err(format!("`{name}` needs {} argument(s)", k + 1)))?;
            w.parse::<u64>().map_err(|_| err(format!("bad number `{w}`")))
        };
        let arity = |n: usize| -> Result<()> {
            if args.len() != n {
                return Err(err(format!("`{name}` takes {n} argument(s), got {}", args.len())));
            }
            Ok(())
        };
        let steps = |v: u64| -> Result<u32> {
            if v == 0 || v > u32::MAX as u64 {
                return Err(err("steps back must be at least 1".into()));
            }
            Ok(v as u32)
        };
        let action = match *name {
            "replay" => {
                arity(2)?;
                AttackAction::Replay { addr: num(0)?, steps_back: steps(num(1)?)? }
            }
            "corrupt" => {
                arity(1)?;
                AttackAction::Corrupt { addr: num(0)? }
            }
            "swap" => {
                arity(2)?;
                AttackAction::Swap { a: num(0)?, b: num(1)? }
            }
            "drop" | "drop_write" => {
                arity(1)?;
                AttackAction::DropWrite { addr: num(0)? }
            }
            "rollback_all" => {
                arity(1)?;
                AttackAction::RollbackAll { steps_back: steps(num(0)?)? }
            }
            "delay_background" => {
                arity(1)?;
                let duration = match args[0] {
                    "inf" | "forever" => None,
                    ms => Some(Duration::from_millis(ms.parse().map_err(|_| err(format!("bad duration `{ms}`")))?)),
                };
                AttackAction::DelayBackground { duration }
            }
            "random" => {
                let count = num(0)?;
                let kinds: Vec<String> = args[1..].iter().map(|s| s.to_string()).collect();
                for k in &kinds {
                    if !matches!(k.as_str(), "replay" | "corrupt" | "swap") {
                        return Err(err(format!("random injections support replay, corrupt, swap; got `{k}`")));
                    }
                }
                if at_op.is_some() || persistent {
                    return Err(err("`random` takes no op index or persistence".into()));
                }
                out.push(ScriptEntry::Random { count, kinds });
                continue;
            }
            other => return Err(err(format!("unknown action `{other}`"))),
        };
        out.push(ScriptEntry::Arm { at_op, action, persistent });
    }
    Ok(out)
}

pub fn load_attack_script(path: &Path) -> Result<Vec<ScriptEntry>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_attack_script(&text)
}
