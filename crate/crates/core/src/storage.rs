//! Engine configuration and the on-disk layout shared by the engines.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use crate::crypto::{BlockCipher, IvSource, Keys};
use crate::disk::{AdversarialDisk, DiskImage};
use crate::error::{Error, FaultKind, IntegrityFault, Result};
use crate::merkle::{MerkleStore, TreeKind};
use crate::seal::{SealedRoot, Sealer};

pub const IMAGE_FILE: &str = "disk.img";
pub const META_FILE: &str = "tree.meta";
pub const SEAL_FILE: &str = "root.seal";
pub const COUNTER_FILE: &str = "trusted.ctr";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    /// A dedicated thread polls the queue.
    Thread,
    /// No thread; the caller drives `background_step`.
    Manual,
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub dir: PathBuf,
    pub capacity_blocks: u64,
    pub cache_fraction: f64,
    pub queue_capacity: usize,
    pub low_watermark: f64,
    /// Background updates per second outside of draining and fsync.
    pub bg_rate: f64,
    pub seal_delay: Duration,
    pub tree_kind: TreeKind,
    pub keys: Keys,
    pub seed: u64,
    /// Per-address history kept by the disk for replay; 0 disables it.
    pub log_depth: usize,
    pub background: Background,
    /// Longest idle wait of the background thread.
    pub poll_interval: Duration,
    /// Record every issued IV and count repeats.
    pub iv_audit: bool,
    /// Checkpoint threshold of the batching engine.
    pub batch_size: usize,
}

impl EngineConfig {
    pub fn new(dir: impl Into<PathBuf>, capacity_blocks: u64) -> Self {
        Self {
            dir: dir.into(),
            capacity_blocks,
            cache_fraction: 0.1,
            queue_capacity: 1024,
            low_watermark: 0.75,
            bg_rate: 50_000.0,
            seal_delay: Duration::from_millis(5),
            tree_kind: TreeKind::dmt(),
            keys: Keys::from_seed(0),
            seed: 0,
            log_depth: 0,
            background: Background::Thread,
            poll_interval: Duration::from_millis(1),
            iv_audit: false,
            batch_size: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.capacity_blocks == 0 {
            return bad("capacity must be at least one block");
        }
        if !(self.cache_fraction > 0.0 && self.cache_fraction <= 1.0) {
            return bad("cache fraction must be in (0, 1]");
        }
        if self.queue_capacity == 0 {
            return bad("queue capacity must be positive");
        }
        if !(self.low_watermark > 0.0 && self.low_watermark < 1.0) {
            return bad("low watermark must be in (0, 1)");
        }
        if !(self.bg_rate > 0.0 && self.bg_rate.is_finite()) {
            return bad("background rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.poll_interval.is_zero() {
            return bad("poll interval must be positive");
        }
        if let TreeKind::Splay(p) = self.tree_kind {
            if !(0.0..=1.0).contains(&p.probability) {
                return bad("splay probability must be in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn image_path(&self) -> PathBuf {
        self.dir.join(IMAGE_FILE)
    }

    pub fn meta_path(&self) -> PathBuf {
        self.dir.join(META_FILE)
    }

    pub fn seal_path(&self) -> PathBuf {
        self.dir.join(SEAL_FILE)
    }

    pub fn counter_path(&self) -> PathBuf {
        self.dir.join(COUNTER_FILE)
    }
}

/// Everything an engine needs at start-up.
pub(crate) struct Storage {
    pub disk: Arc<AdversarialDisk>,
    pub cipher: BlockCipher,
    pub ivs: IvSource,
    pub tree: Option<MerkleStore>,
    pub sealer: Option<Sealer>,
    pub sealed: Option<SealedRoot>,
}

fn iv_source(config: &EngineConfig, epoch: u64) -> IvSource {
    let ivs = IvSource::for_epoch(config.seed, epoch);
    if config.iv_audit {
        ivs.with_audit()
    } else {
        ivs
    }
}

/// Formats a fresh image. With `authenticated`, also builds the tree,
/// writes the metadata file and seals the initial root.
pub(crate) fn create(config: &EngineConfig, authenticated: bool) -> Result<Storage> {
    config.validate()?;
    fs::create_dir_all(&config.dir)?;
    let cipher = BlockCipher::new(&config.keys.block);
    let (image, tags) = DiskImage::format_with_tags(&config.image_path(), config.capacity_blocks, &cipher)?;
    let disk = Arc::new(AdversarialDisk::new(image, config.log_depth, config.seed));
    if !authenticated {
        return Ok(Storage { disk, cipher, ivs: iv_source(config, 1), tree: None, sealer: None, sealed: None });
    }
    let mut tree = MerkleStore::from_tags(config.tree_kind, config.keys.hash.clone(), tags, config.cache_fraction)?;
    tree.persist_metadata(&config.meta_path())?;
    remove_if_present(&config.counter_path())?;
    let mut sealer = Sealer::new(config.keys.hash.clone(), &config.seal_path(), &config.counter_path(), config.seal_delay)?;
    let sealed = sealer.seal(tree.root().hash)?;
    disk.attach_sidecar(&config.meta_path());
    disk.attach_sidecar(&config.seal_path());
    Ok(Storage {
        disk,
        cipher,
        ivs: iv_source(config, sealed.counter),
        tree: Some(tree),
        sealer: Some(sealer),
        sealed: Some(sealed),
    })
}

/// Reopens the files in `config.dir`, checking the metadata and image
/// against the latest sealed root, and seals once to open a new epoch.
/// `disk` reuses an existing handle (and its snapshots) for the image.
pub(crate) fn recover(config: &EngineConfig, disk: Option<Arc<AdversarialDisk>>) -> Result<Storage> {
    config.validate()?;
    let cipher = BlockCipher::new(&config.keys.block);
    let disk = match disk {
        Some(d) => d,
        None => Arc::new(AdversarialDisk::new(DiskImage::open(&config.image_path())?, config.log_depth, config.seed)),
    };
    let mut tree = MerkleStore::load_metadata(&config.meta_path(), config.keys.hash.clone(), config.cache_fraction)?;
    if tree.capacity() != disk.capacity() {
        return Err(Error::MetadataCorrupt(format!(
            "metadata capacity {} differs from image capacity {}",
            tree.capacity(),
            disk.capacity()
        )));
    }
    let mut sealer = Sealer::new(config.keys.hash.clone(), &config.seal_path(), &config.counter_path(), config.seal_delay)?;
    let sealed = sealer.load_latest()?;
    let tags = disk.image().read_tags()?;
    tree.check_recovered(&tags, &sealed.root)?;
    if tree.root().hash != sealed.root {
        return Err(IntegrityFault::global(FaultKind::RecoveredRoot).into());
    }
    disk.attach_sidecar(&config.meta_path());
    disk.attach_sidecar(&config.seal_path());
    let sealed = sealer.seal(sealed.root)?;
    Ok(Storage {
        disk,
        cipher,
        ivs: iv_source(config, sealed.counter),
        tree: Some(tree),
        sealer: Some(sealer),
        sealed: Some(sealed),
    })
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}
