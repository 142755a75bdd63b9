//! Common block interface, metrics and engine selection.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use hdrhistogram::Histogram;

use crate::crypto::{BlockData, BLOCK_SIZE};
use crate::disk::AdversarialDisk;
use crate::error::{Error, FaultKind, Result};

/// Latency histogram in nanoseconds.
#[derive(Clone)]
pub struct LatencyHist {
    hist: Histogram<u64>,
}

impl Default for LatencyHist {
    fn default() -> Self {
        Self { hist: Histogram::new_with_bounds(1, 3_600_000_000_000, 3).expect("valid histogram bounds") }
    }
}

impl fmt::Debug for LatencyHist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LatencyHist")
            .field("count", &self.count())
            .field("p50_ns", &self.quantile(0.5))
            .finish()
    }
}

impl LatencyHist {
    pub fn record(&mut self, d: Duration) {
        self.record_ns(d.as_nanos().min(u64::MAX as u128) as u64);
    }

    pub fn record_ns(&mut self, ns: u64) {
        self.hist.saturating_record(ns.max(1));
    }

    pub fn count(&self) -> u64 {
        self.hist.len()
    }

    /// Value at quantile `q` in nanoseconds; 0 when empty.
    pub fn quantile(&self, q: f64) -> u64 {
        if self.hist.is_empty() {
            0
        } else {
            self.hist.value_at_quantile(q)
        }
    }

    pub fn mean_ns(&self) -> f64 {
        if self.hist.is_empty() {
            0.0
        } else {
            self.hist.mean()
        }
    }

    pub fn merge(&mut self, other: &LatencyHist) {
        self.hist.add(&other.hist).expect("histograms share bounds");
    }

    pub fn clear(&mut self) {
        self.hist.reset();
    }
}

/// Time between handing read data to the caller and verifying it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WovSample {
    pub addr: u64,
    pub returned_at: Instant,
    pub verified_at: Instant,
}

impl WovSample {
    pub fn wov(&self) -> Duration {
        self.verified_at.saturating_duration_since(self.returned_at)
    }
}

/// A tampered read caught after its data was returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeferredFault {
    pub addr: u64,
    pub kind: FaultKind,
    pub returned_at: Instant,
    pub detected_at: Instant,
}

#[derive(Clone, Debug, Default)]
pub struct EngineMetrics {
    pub reads: u64,
    pub writes: u64,
    pub fsyncs: u64,
    pub seals: u64,
    /// Pending updates replaced by a newer write to the same block.
    pub overrides: u64,
    /// Writes that blocked on a full update queue.
    pub stalls: u64,
    pub drains: u64,
    pub updates_applied: u64,
    /// Reads served by comparing against a pending update.
    pub queued_reads: u64,
    pub async_alerts: u64,
    pub hash_ops: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// Per-block tree verification latency.
    pub verify_latency: LatencyHist,
    /// Per-block tree update latency.
    pub update_latency: LatencyHist,
    pub wov: Vec<WovSample>,
}

impl EngineMetrics {
    pub fn cache_hit_rate(&self) -> f64 {
        let total = self.cache_hits + self.cache_misses;
        if total == 0 {
            0.0
        } else {
            self.cache_hits as f64 / total as f64
        }
    }

    pub fn mean_wov(&self) -> Duration {
        if self.wov.is_empty() {
            return Duration::ZERO;
        }
        let total: Duration = self.wov.iter().map(|s| s.wov()).sum();
        total / self.wov.len() as u32
    }
}

/// Self-reported memory accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryReport {
    pub per_request_bytes: usize,
    pub queue_capacity: usize,
    pub queue_bytes: usize,
    pub cache_entries: usize,
    pub cache_bytes: usize,
    pub tree_nodes: usize,
    pub tree_bytes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EngineKind {
    Plain,
    Aead,
    Sync,
    Batch,
    Pac,
}

impl EngineKind {
    pub const ALL: [EngineKind; 5] = [EngineKind::Plain, EngineKind::Aead, EngineKind::Sync, EngineKind::Batch, EngineKind::Pac];

    pub fn name(&self) -> &'static str {
        match self {
            EngineKind::Plain => "plain",
            EngineKind::Aead => "aead",
            EngineKind::Sync => "sync",
            EngineKind::Batch => "batch",
            EngineKind::Pac => "pac",
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown engine `{s}` (expected plain|aead|sync|batch|pac)")))
    }
}

pub trait BlockEngine: Send {
    fn kind(&self) -> EngineKind;

    fn capacity(&self) -> u64;

    fn read(&mut self, addr: u64) -> Result<Box<BlockData>>;

    fn write(&mut self, addr: u64, data: &BlockData) -> Result<()>;

    fn fsync(&mut self) -> Result<()>;

    fn metrics(&self) -> EngineMetrics;

    /// Clears latency histograms, counters and WoV samples.
    fn reset_metrics(&mut self);

    fn disk(&self) -> &Arc<AdversarialDisk>;

    /// Faults detected after the affected read returned, since the last call.
    fn take_deferred_faults(&mut self) -> Vec<DeferredFault> {
        Vec::new()
    }

    /// Reads `count` consecutive blocks starting at `addr`.
    fn read_range(&mut self, addr: u64, count: u64, out: &mut Vec<u8>) -> Result<()> {
        out.clear();
        for a in addr..addr + count {
            out.extend_from_slice(&self.read(a)?[..]);
        }
        Ok(())
    }

    /// Writes `data` (a whole number of blocks) starting at `addr`.
    fn write_range(&mut self, addr: u64, data: &[u8]) -> Result<()> {
        if !data.len().is_multiple_of(BLOCK_SIZE) {
            return Err(Error::Config(format!("write of {} bytes is not block aligned", data.len())));
        }
        for (i, chunk) in data.chunks(BLOCK_SIZE).enumerate() {
            self.write(addr + i as u64, chunk.try_into().unwrap())?;
        }
        Ok(())
    }
}

pub(crate) fn check_range(addr: u64, capacity: u64) -> Result<()> {
    if addr >= capacity {
        return Err(Error::OutOfRange { addr, capacity });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engine_names_roundtrip() {
        for k in EngineKind::ALL {
            assert_eq!(k.name().parse::<EngineKind>().unwrap(), k);
        }
        assert!("dmt".parse::<EngineKind>().is_err());
    }

    #[test]
    fn histogram_quantiles() {
        let mut h = LatencyHist::default();
        for ns in 1..=1000u64 {
            h.record_ns(ns * 1000);
        }
        let p50 = h.quantile(0.5) as f64;
        assert!((p50 - 500_000.0).abs() / 500_000.0 < 0.01);
        assert_eq!(h.count(), 1000);
    }
}
