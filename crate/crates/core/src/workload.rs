//! Zipfian workload generation and the throughput benchmark.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::baselines::build_engine;
use crate::crypto::{BlockData, BLOCK_SIZE};
use crate::engine::{BlockEngine, EngineKind, EngineMetrics, LatencyHist};
use crate::error::{Error, Result};
use crate::storage::EngineConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub read_ratio: f64,
    /// Bytes per operation; a multiple of the block size.
    pub io_size: usize,
    pub zipf_theta: f64,
    /// Writes between fsyncs; 0 never fsyncs during the run.
    pub fsync_period: u64,
    pub threads: usize,
    /// Operations generated ahead of submission per worker.
    pub io_depth: usize,
    /// Measured operations.
    pub ops: u64,
    /// Operations run before measurement starts.
    pub warmup_ops: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            read_ratio: 0.01,
            io_size: 32 * 1024,
            zipf_theta: 2.5,
            fsync_period: 1000,
            threads: 1,
            io_depth: 32,
            ops: 20_000,
            warmup_ops: 2_000,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.read_ratio) {
            return bad("read ratio must be in [0, 1]");
        }
        if self.io_size == 0 || !self.io_size.is_multiple_of(BLOCK_SIZE) {
            return bad("io size must be a positive multiple of 4096");
        }
        if !(self.zipf_theta >= 0.0 && self.zipf_theta.is_finite()) {
            return bad("zipf theta must be a finite value >= 0");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if self.io_depth == 0 {
            return bad("io depth must be at least 1");
        }
        Ok(())
    }

    pub fn blocks_per_op(&self) -> u64 {
        (self.io_size / BLOCK_SIZE) as u64
    }
}

/// Zipf-distributed ranks mapped through a seeded permutation, so the hot
/// items are scattered over the index space.
#[derive(Clone, Debug)]
pub struct ZipfSampler {
    dist: Zipf<f64>,
    perm: Vec<u64>,
}

impl ZipfSampler {
    pub fn new(n: u64, theta: f64, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("zipf domain must be non-empty".into()));
        }
        let dist = Zipf::new(n, theta).map_err(|e| Error::Config(format!("zipf({n}, {theta}): {e}")))?;
        let mut perm: Vec<u64> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7065_726d));
        Ok(Self { dist, perm })
    }

    pub fn len(&self) -> u64 {
        self.perm.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Zero-based popularity rank; 0 is the hottest.
    pub fn rank<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        (self.dist.sample(rng) as u64 - 1).min(self.len() - 1)
    }

    /// The item at a given rank.
    pub fn item(&self, rank: u64) -> u64 {
        self.perm[rank as usize]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.item(self.rank(rng))
    }
}

/// One draw of a Zipf index in `[0, n)` over the permutation fixed by
/// `seed`.
pub fn zipf_sample<R: Rng + ?Sized>(theta: f64, n: u64, seed: u64, rng: &mut R) -> Result<u64> {
    Ok(ZipfSampler::new(n, theta, seed)?.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Op {
    pub kind: OpKind,
    /// First block of the extent.
    pub block: u64,
    pub blocks: u64,
}

/// Deterministic operation stream over io-sized extents.
pub struct OpStream {
    zipf: ZipfSampler,
    rng: ChaCha8Rng,
    read_ratio: f64,
    blocks_per_op: u64,
}

impl OpStream {
    /// `stream` separates the sequences of concurrent workers.
    pub fn new(spec: &WorkloadSpec, capacity_blocks: u64, stream: u64) -> Result<Self> {
        spec.validate()?;
        let bpo = spec.blocks_per_op();
        let extents = capacity_blocks / bpo;
        if extents == 0 {
            return Err(Error::Config(format!(
                "capacity of {capacity_blocks} blocks is smaller than one {}-byte operation",
                spec.io_size
            )));
        }
        Ok(Self {
            zipf: ZipfSampler::new(extents, spec.zipf_theta, spec.seed)?,
            rng: ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))),
            read_ratio: spec.read_ratio,
            blocks_per_op: bpo,
        })
    }

    pub fn next_op(&mut self) -> Op {
        let kind = if self.rng.gen_bool(self.read_ratio) { OpKind::Read } else { OpKind::Write };
        let extent = self.zipf.sample(&mut self.rng);
        Op { kind, block: extent * self.blocks_per_op, blocks: self.blocks_per_op }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Fills a block with a pattern derived from `stamp`; stamp 0 is all zeros.
pub fn fill_block(buf: &mut [u8], stamp: u64) {
    let word = stamp.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stamp;
    for (i, chunk) in buf.chunks_exact_mut(8).enumerate() {
        let v = if stamp == 0 { 0 } else { word.rotate_left(i as u32 % 64) ^ stamp };
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    if stamp != 0 {
        buf[..8].copy_from_slice(&stamp.to_le_bytes());
    }
}

pub fn stamped_block(stamp: u64) -> Box<BlockData> {
    let mut b = Box::new([0u8; BLOCK_SIZE]);
    fill_block(&mut b[..], stamp);
    b
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub engine: EngineKind,
    pub spec: WorkloadSpec,
    pub ops: u64,
    pub reads: u64,
    pub writes: u64,
    pub fsyncs: u64,
    pub bytes: u64,
    pub elapsed: Duration,
    pub op_latency: LatencyHist,
    pub read_latency: LatencyHist,
    pub write_latency: LatencyHist,
    pub fsync_latency: LatencyHist,
    pub metrics: EngineMetrics,
}

impl BenchResult {
    pub fn throughput_bps(&self) -> f64 {
        self.bytes as f64 / self.elapsed.as_secs_f64()
    }

    pub fn throughput_mbps(&self) -> f64 {
        self.throughput_bps() / 1e6
    }

    pub fn iops(&self) -> f64 {
        self.ops as f64 / self.elapsed.as_secs_f64()
    }

    pub fn p50_us(&self) -> f64 {
        self.op_latency.quantile(0.5) as f64 / 1e3
    }

    pub fn p999_us(&self) -> f64 {
        self.op_latency.quantile(0.999) as f64 / 1e3
    }

    pub fn mean_wov_ms(&self) -> f64 {
        self.metrics.mean_wov().as_secs_f64() * 1e3
    }
}

#[derive(Default)]
struct WorkerStats {
    reads: u64,
    writes: u64,
    fsyncs: u64,
    op_latency: LatencyHist,
    read_latency: LatencyHist,
    write_latency: LatencyHist,
    fsync_latency: LatencyHist,
}

struct Shared<'a> {
    engine: Mutex<&'a mut dyn BlockEngine>,
    writes: AtomicU64,
    fsync_period: u64,
}

/// Generates `count` operations, then submits them in order.
fn run_ops(shared: &Shared<'_>, stream: &mut OpStream, count: u64, stamp: &mut u64, out: &mut WorkerStats) -> Result<()> {
    let mut buf = vec![0u8; stream.blocks_per_op as usize * BLOCK_SIZE];
    let window: Vec<Op> = (0..count).map(|_| stream.next_op()).collect();
    for op in &window {
        let t = Instant::now();
        let mut engine = shared.engine.lock();
        match op.kind {
            OpKind::Read => {
                engine.read_range(op.block, op.blocks, &mut buf)?;
                drop(engine);
                let dt = t.elapsed();
                out.read_latency.record(dt);
                out.op_latency.record(dt);
                out.reads += 1;
            }
            OpKind::Write => {
                for chunk in buf.chunks_exact_mut(BLOCK_SIZE) {
                    *stamp += 1;
                    fill_block(chunk, *stamp);
                }
                engine.write_range(op.block, &buf)?;
                drop(engine);
                let dt = t.elapsed();
                out.write_latency.record(dt);
                out.op_latency.record(dt);
                out.writes += 1;
                let n = shared.writes.fetch_add(1, Ordering::Relaxed) + 1;
                if shared.fsync_period > 0 && n.is_multiple_of(shared.fsync_period) {
                    let t = Instant::now();
                    shared.engine.lock().fsync()?;
                    out.fsync_latency.record(t.elapsed());
                    out.fsyncs += 1;
                }
            }
        }
    }
    Ok(())
}

/// Runs `spec` against an already built engine: warm-up, metric reset,
/// then the measured phase ending with an fsync so deferred integrity
/// work is paid for inside the measured time.
pub fn run_on_engine(engine: &mut dyn BlockEngine, spec: &WorkloadSpec) -> Result<BenchResult> {
    spec.validate()?;
    let kind = engine.kind();
    let capacity = engine.capacity();
    let mut streams: Vec<OpStream> =
        (0..spec.threads as u64).map(|t| OpStream::new(spec, capacity, t)).collect::<Result<_>>()?;
    let shared = Shared { engine: Mutex::new(engine), writes: AtomicU64::new(0), fsync_period: spec.fsync_period };
    let abort = |phase: &str, e: Error| Error::Halted(format!("{kind} engine aborted during {phase}: {e}"));
    let threads = spec.threads as u64;
    let share = |total: u64, t: u64| total / threads + u64::from(t < total % threads);
    let window = spec.io_depth;

    let run_phase = |streams: &mut Vec<OpStream>, total: u64, stamp_phase: u64| -> Result<Vec<WorkerStats>> {
        std::thread::scope(|s| {
            let handles: Vec<_> = streams
                .iter_mut()
                .enumerate()
                .map(|(t, stream)| {
                    let shared = &shared;
                    s.spawn(move || {
                        let mut st = WorkerStats::default();
                        let mut stamp = (stamp_phase << 56) | ((t as u64) << 48);
                        let n = share(total, t as u64);
                        let mut done = 0;
                        while done < n {
                            let k = (n - done).min(window as u64);
                            run_ops(shared, stream, k, &mut stamp, &mut st)?;
                            done += k;
                        }
                        Ok(st)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };

    run_phase(&mut streams, spec.warmup_ops, 1).map_err(|e| abort("warm-up", e))?;
    shared.engine.lock().reset_metrics();
    shared.writes.store(0, Ordering::Relaxed);
    let start = Instant::now();
    let stats = run_phase(&mut streams, spec.ops, 2).map_err(|e| abort("measurement", e))?;
    let t = Instant::now();
    shared.engine.lock().fsync().map_err(|e| abort("final fsync", e))?;
    let final_fsync = t.elapsed();
    let elapsed = start.elapsed();
    let engine = shared.engine.into_inner();

    let mut total = WorkerStats::default();
    total.fsync_latency.record(final_fsync);
    total.fsyncs = 1;
    for w in &stats {
        total.reads += w.reads;
        total.writes += w.writes;
        total.fsyncs += w.fsyncs;
        total.op_latency.merge(&w.op_latency);
        total.read_latency.merge(&w.read_latency);
        total.write_latency.merge(&w.write_latency);
        total.fsync_latency.merge(&w.fsync_latency);
    }
    let ops = total.reads + total.writes;
    Ok(BenchResult {
        engine: kind,
        spec: spec.clone(),
        ops,
        reads: total.reads,
        writes: total.writes,
        fsyncs: total.fsyncs,
        bytes: ops * spec.io_size as u64,
        elapsed,
        op_latency: total.op_latency,
        read_latency: total.read_latency,
        write_latency: total.write_latency,
        fsync_latency: total.fsync_latency,
        metrics: engine.metrics(),
    })
}

/// Builds the named engine in `config.dir` and runs `spec` on it.
pub fn run_bench(kind: EngineKind, spec: &WorkloadSpec, config: &EngineConfig) -> Result<BenchResult> {
    let mut engine = build_engine(kind, config.clone())?;
    run_on_engine(engine.as_mut(), spec)
}

pub const CSV_HEADER: [&str; 17] = [
    "engine",
    "capacity_blocks",
    "read_ratio",
    "io_size",
    "zipf",
    "fsync_period",
    "bg_rate",
    "batch_size",
    "cache_frac",
    "queue_cap",
    "throughput_MBps",
    "p50_us",
    "p999_us",
    "cache_hit_rate",
    "mean_wov_ms",
    "overrides",
    "stalls",
];

pub fn csv_row(r: &BenchResult, config: &EngineConfig) -> Vec<String> {
    vec![
        r.engine.to_string(),
        config.capacity_blocks.to_string(),
        r.spec.read_ratio.to_string(),
        r.spec.io_size.to_string(),
        r.spec.zipf_theta.to_string(),
        r.spec.fsync_period.to_string(),
        config.bg_rate.to_string(),
        config.batch_size.to_string(),
        config.cache_fraction.to_string(),
        config.queue_capacity.to_string(),
        format!("{:.3}", r.throughput_mbps()),
        format!("{:.3}", r.p50_us()),
        format!("{:.3}", r.p999_us()),
        format!("{:.5}", r.metrics.cache_hit_rate()),
        format!("{:.4}", r.mean_wov_ms()),
        r.metrics.overrides.to_string(),
        r.metrics.stalls.to_string(),
    ]
}

pub fn write_csv(path: &Path, rows: &[(BenchResult, EngineConfig)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Disk(e.into()))?;
    w.write_record(CSV_HEADER).map_err(|e| Error::Disk(e.into()))?;
    for (r, c) in rows {
        w.write_record(csv_row(r, c)).map_err(|e| Error::Disk(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zipf_theta_zero_is_uniform() {
        let z = ZipfSampler::new(1024, 0.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = vec![0u32; 1024];
        let draws = 1_000_000;
        for _ in 0..draws {
            counts[z.sample(&mut rng) as usize] += 1;
        }
        let expected = draws as f64 / 1024.0;
        // Empirical CDF within 1% of the uniform CDF everywhere.
        let mut cum = 0u64;
        let mut ks = 0f64;
        for (k, &c) in counts.iter().enumerate() {
            cum += c as u64;
            ks = ks.max((cum as f64 / draws as f64 - (k + 1) as f64 / 1024.0).abs());
        }
        assert!(ks < 0.01, "cdf distance {ks}");
        // Bucket counts consistent with multinomial noise.
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 1023.0 + 5.0 * (2.0f64 * 1023.0).sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn zipf_top_ranks_follow_power_law() {
        let z = ZipfSampler::new(1024, 2.5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut first, mut second) = (0u64, 0u64);
        for _ in 0..1_000_000 {
            match z.sample(&mut rng) {
                x if x == z.item(0) => first += 1,
                x if x == z.item(1) => second += 1,
                _ => {}
            }
        }
        let ratio = first as f64 / second as f64;
        let expected = 2f64.powf(2.5);
        assert!((ratio - expected).abs() / expected < 0.1, "ratio {ratio} vs {expected}");
    }

    #[test]
    fn zipf_is_deterministic_and_scattered() {
        let a = ZipfSampler::new(4096, 2.5, 9).unwrap();
        let b = ZipfSampler::new(4096, 2.5, 9).unwrap();
        let mut ra = ChaCha8Rng::seed_from_u64(1);
        let mut rb = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<u64> = (0..1000).map(|_| a.sample(&mut ra)).collect();
        let ys: Vec<u64> = (0..1000).map(|_| b.sample(&mut rb)).collect();
        assert_eq!(xs, ys);
        assert_ne!(a.item(0), 0, "permutation should move the hottest rank");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(zipf_sample(1.0, 10, 0, &mut rng).unwrap() < 10);
        assert!(ZipfSampler::new(0, 1.0, 0).is_err());
    }

    #[test]
    fn stream_is_deterministic_and_aligned() {
        let spec = WorkloadSpec { seed: 5, ..Default::default() };
        let mut a = OpStream::new(&spec, 1024, 0).unwrap();
        let mut b = OpStream::new(&spec, 1024, 0).unwrap();
        let mut c = OpStream::new(&spec, 1024, 1).unwrap();
        let xs: Vec<Op> = (0..500).map(|_| a.next_op()).collect();
        let ys: Vec<Op> = (0..500).map(|_| b.next_op()).collect();
        let zs: Vec<Op> = (0..500).map(|_| c.next_op()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
        assert!(xs.iter().all(|o| o.block % 8 == 0 && o.block + o.blocks <= 1024));
        let reads = xs.iter().filter(|o| o.kind == OpKind::Read).count();
        assert!(reads < 25);
    }

    #[test]
    fn spec_validation() {
        assert!(WorkloadSpec { io_size: 1000, ..Default::default() }.validate().is_err());
        assert!(WorkloadSpec { read_ratio: 1.5, ..Default::default() }.validate().is_err());
        assert!(WorkloadSpec { threads: 0, ..Default::default() }.validate().is_err());
        assert!(OpStream::new(&WorkloadSpec::default(), 4, 0).is_err());
    }

    #[test]
    fn stamps_are_distinct() {
        assert_eq!(&stamped_block(0)[..], &[0u8; BLOCK_SIZE][..]);
        assert_ne!(stamped_block(1), stamped_block(2));
    }

    fn small(dir: &Path) -> EngineConfig {
        let mut c = EngineConfig::new(dir, 512);
        c.seal_delay = Duration::from_millis(1);
        c
    }

    #[test]
    fn bench_counts_are_consistent() {
        for kind in EngineKind::ALL {
            let d = tempfile::tempdir().unwrap();
            let spec = WorkloadSpec { ops: 400, warmup_ops: 50, fsync_period: 100, read_ratio: 0.2, ..Default::default() };
            let r = run_bench(kind, &spec, &small(d.path())).unwrap();
            assert_eq!(r.ops, 400);
            assert_eq!(r.op_latency.count(), r.ops);
            assert_eq!(r.read_latency.count() + r.write_latency.count(), r.ops);
            assert_eq!(r.fsyncs, r.writes / 100 + 1);
            assert_eq!(r.metrics.reads, r.reads * 8, "{kind}");
            assert_eq!(r.metrics.writes, r.writes * 8, "{kind}");
            let moved = r.throughput_bps() * r.elapsed.as_secs_f64();
            assert!((moved - r.bytes as f64).abs() / (r.bytes as f64) < 0.02);
        }
    }

    #[test]
    fn multi_threaded_bench_runs() {
        let d = tempfile::tempdir().unwrap();
        let spec = WorkloadSpec { ops: 301, warmup_ops: 10, threads: 3, ..Default::default() };
        let r = run_bench(EngineKind::Pac, &spec, &small(d.path())).unwrap();
        assert_eq!(r.ops, 301);
        assert_eq!(r.op_latency.count(), 301);
    }

    #[test]
    fn csv_output() {
        let d = tempfile::tempdir().unwrap();
        let c = small(d.path());
        let spec = WorkloadSpec { ops: 50, warmup_ops: 0, ..Default::default() };
        let r = run_bench(EngineKind::Sync, &spec, &c).unwrap();
        let out = d.path().join("r.csv");
        write_csv(&out, &[(r, c)]).unwrap();
        let text = std::fs::read_to_string(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert!(lines.next().unwrap().starts_with("sync,512,"));
    }
}
