//! Command-line driver for benchmarks, attack scripts and crash schedules.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pacstore::attack::{run_attack_suite, AttackOptions};
use pacstore::crash::{load_crash_schedule, random_crash_schedule, run_crash_suite, CrashReport};
use pacstore::disk::load_attack_script;
use pacstore::merkle::TreeKind;
use pacstore::workload::{csv_row, run_bench, write_csv, BenchResult, WorkloadSpec, CSV_HEADER};
use pacstore::{EngineConfig, EngineKind};

#[derive(Parser)]
#[command(name = "pac", about = "Authenticated block storage benchmarks and security harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Zipfian benchmark against one or more engines.
    Bench(BenchArgs),
    /// Run an attack script against a live workload.
    Attack(AttackArgs),
    /// Run a crash/rollback schedule and check recovery.
    Crash(CrashArgs),
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Directory for the image and metadata files (a temporary one by default).
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long, default_value_t = 262_144)]
    capacity_blocks: u64,
    #[arg(long, default_value_t = 0.1)]
    cache_frac: f64,
    #[arg(long, default_value_t = 1024)]
    queue_cap: usize,
    #[arg(long, default_value_t = 0.75)]
    low_watermark: f64,
    /// Background tree updates per second.
    #[arg(long, default_value_t = 50_000.0)]
    bg_rate: f64,
    #[arg(long, default_value_t = 5.0)]
    seal_delay_ms: f64,
    /// Checkpoint size of the batching engine.
    #[arg(long, default_value_t = 1000)]
    batch_size: usize,
    /// `dmt`, `balanced`, or `splay:<probability>[:nowindow]`.
    #[arg(long, default_value = "dmt")]
    tree: String,
    /// Versions per block kept by the disk for replay attacks.
    #[arg(long, default_value_t = 0)]
    log_depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    #[arg(long, default_value_t = 0.01)]
    read_ratio: f64,
    #[arg(long, default_value_t = 32_768)]
    io_size: usize,
    #[arg(long, default_value_t = 2.5)]
    zipf: f64,
    #[arg(long, default_value_t = 1000)]
    fsync_period: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 32)]
    iodepth: usize,
    #[arg(long, default_value_t = 20_000)]
    ops: u64,
    #[arg(long, default_value_t = 2_000)]
    warmup: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Engine names, comma separated.
    #[arg(long, default_value = "pac")]
    engine: String,
    #[command(flatten)]
    engine_args: EngineArgs,
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Sweep one parameter: `name=v1,v2,...` using a flag name such as
    /// `fsync-period`, `bg-rate`, `batch-size` or `read-ratio`.
    #[arg(long)]
    sweep: Vec<String>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, default_value = "pac")]
    engine: String,
    #[arg(long)]
    script: PathBuf,
    #[command(flatten)]
    engine_args: EngineArgs,
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Print one line per injection.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct CrashArgs {
    #[arg(long, default_value = "pac")]
    engine: String,
    /// Schedule file; without it, random schedules are generated.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Number of random schedules when no file is given.
    #[arg(long, default_value_t = 100)]
    random: usize,
    #[command(flatten)]
    engine_args: EngineArgs,
}

fn parse_tree(s: &str) -> Result<TreeKind> {
    let parts: Vec<&str> = s.split(':').collect();
    Ok(match parts.as_slice() {
        ["dmt"] => TreeKind::dmt(),
        ["balanced"] => TreeKind::Balanced,
        ["splay", p] => TreeKind::splay(p.parse().context("splay probability")?, true),
        ["splay", p, "nowindow"] => TreeKind::splay(p.parse().context("splay probability")?, false),
        _ => bail!("unknown tree `{s}` (expected dmt, balanced or splay:<p>[:nowindow])"),
    })
}

fn parse_engines(s: &str) -> Result<Vec<EngineKind>> {
    s.split(',').map(|e| e.trim().parse::<EngineKind>().map_err(Into::into)).collect()
}

impl EngineArgs {
    fn config(&self, dir: PathBuf) -> Result<EngineConfig> {
        let mut c = EngineConfig::new(dir, self.capacity_blocks);
        c.cache_fraction = self.cache_frac;
        c.queue_capacity = self.queue_cap;
        c.low_watermark = self.low_watermark;
        c.bg_rate = self.bg_rate;
        c.seal_delay = Duration::from_secs_f64(self.seal_delay_ms / 1e3);
        c.batch_size = self.batch_size;
        c.tree_kind = parse_tree(&self.tree)?;
        c.log_depth = self.log_depth;
        c.seed = self.seed;
        c.validate()?;
        Ok(c)
    }
}

impl WorkloadArgs {
    fn spec(&self, seed: u64) -> Result<WorkloadSpec> {
        let s = WorkloadSpec {
            read_ratio: self.read_ratio,
            io_size: self.io_size,
            zipf_theta: self.zipf,
            fsync_period: self.fsync_period,
            threads: self.threads,
            io_depth: self.iodepth,
            ops: self.ops,
            warmup_ops: self.warmup,
            seed,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Working directory: the given one, or a fresh temporary directory kept
/// alive by the returned guard.
fn workdir(dir: &Option<PathBuf>) -> Result<(PathBuf, Option<tempfile::TempDir>)> {
    match dir {
        Some(d) => Ok((d.clone(), None)),
        None => {
            let t = tempfile::tempdir()?;
            Ok((t.path().to_path_buf(), Some(t)))
        }
    }
}

/// Expands the sweeps into the cross product of parameter assignments.
fn sweep_points(sweeps: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut points = vec![Vec::new()];
    for s in sweeps {
        let (name, values) = s.split_once('=').with_context(|| format!("sweep `{s}` is not name=v1,v2"))?;
        let mut next = Vec::new();
        for p in &points {
            for v in values.split(',') {
                let mut q: Vec<(String, String)> = p.clone();
                q.push((name.trim().to_string(), v.trim().to_string()));
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

fn apply_override(e: &mut EngineArgs, w: &mut WorkloadArgs, name: &str, v: &str) -> Result<()> {
    let bad = || format!("bad value `{v}` for {name}");
    match name.replace('_', "-").as_str() {
        "capacity-blocks" => e.capacity_blocks = v.parse().with_context(bad)?,
        "cache-frac" => e.cache_frac = v.parse().with_context(bad)?,
        "queue-cap" => e.queue_cap = v.parse().with_context(bad)?,
        "low-watermark" => e.low_watermark = v.parse().with_context(bad)?,
        "bg-rate" => e.bg_rate = v.parse().with_context(bad)?,
        "seal-delay-ms" => e.seal_delay_ms = v.parse().with_context(bad)?,
        "batch-size" => e.batch_size = v.parse().with_context(bad)?,
        "tree" => e.tree = v.to_string(),
        "read-ratio" => w.read_ratio = v.parse().with_context(bad)?,
        "io-size" => w.io_size = v.parse().with_context(bad)?,
        "zipf" => w.zipf = v.parse().with_context(bad)?,
        "fsync-period" => w.fsync_period = v.parse().with_context(bad)?,
        "threads" => w.threads = v.parse().with_context(bad)?,
        "iodepth" => w.iodepth = v.parse().with_context(bad)?,
        "ops" => w.ops = v.parse().with_context(bad)?,
        other => bail!("cannot sweep `{other}`"),
    }
    Ok(())
}

fn print_result(r: &BenchResult) {
    let m = &r.metrics;
    println!(
        "{:<6} {:>9.2} MB/s  p50 {:>9.1} us  p99.9 {:>10.1} us  hit {:.4}  wov {:>9.3} ms  overrides {:>8}  stalls {:>6}  seals {:>5}",
        r.engine.name(),
        r.throughput_mbps(),
        r.p50_us(),
        r.p999_us(),
        m.cache_hit_rate(),
        r.mean_wov_ms(),
        m.overrides,
        m.stalls,
        m.seals
    );
}

fn bench(args: BenchArgs) -> Result<()> {
    let engines = parse_engines(&args.engine)?;
    let mut rows = Vec::new();
    for point in sweep_points(&args.sweep)? {
        let mut e = args.engine_args.clone();
        let mut w = args.workload.clone();
        for (name, v) in &point {
            apply_override(&mut e, &mut w, name, v)?;
        }
        if !point.is_empty() {
            let label: Vec<String> = point.iter().map(|(n, v)| format!("{n}={v}")).collect();
            println!("# {}", label.join(" "));
        }
        for &kind in &engines {
            let (dir, _guard) = workdir(&e.dir)?;
            let config = e.config(dir)?;
            let spec = w.spec(e.seed)?;
            let r = run_bench(kind, &spec, &config).with_context(|| format!("{kind} benchmark"))?;
            print_result(&r);
            rows.push((r, config));
        }
    }
    if let Some(path) = &args.csv {
        write_csv(path, &rows).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {} rows to {}", rows.len(), path.display());
    } else if rows.len() > 1 {
        println!("{}", CSV_HEADER.join(","));
        for (r, c) in &rows {
            println!("{}", csv_row(r, c).join(","));
        }
    }
    Ok(())
}

fn attack(args: AttackArgs) -> Result<()> {
    let script = load_attack_script(&args.script).with_context(|| format!("reading {}", args.script.display()))?;
    for kind in parse_engines(&args.engine)? {
        let (dir, _guard) = workdir(&args.engine_args.dir)?;
        let config = args.engine_args.config(dir)?;
        let spec = args.workload.spec(args.engine_args.seed)?;
        let report = run_attack_suite(kind, &config, &spec, &script, &AttackOptions::default())?;
        if args.verbose {
            for (i, inj) in report.injections.iter().enumerate() {
                let ttd = inj.time_to_detection.map_or("-".into(), |d| format!("{:.3}ms", d.as_secs_f64() * 1e3));
                println!(
                    "{i:>5} {:<16} block {:>8} {:<24} ttd {ttd:>10} {}",
                    inj.action.name(),
                    inj.probe,
                    inj.outcome.name(),
                    inj.error.as_deref().unwrap_or("")
                );
            }
        }
        println!("{}", report.summary());
    }
    Ok(())
}

fn crash(args: CrashArgs) -> Result<()> {
    let kind: EngineKind = args.engine.parse()?;
    let schedules = match &args.schedule {
        Some(p) => vec![load_crash_schedule(p).with_context(|| format!("reading {}", p.display()))?],
        None => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.engine_args.seed);
            (0..args.random).map(|_| random_crash_schedule(&mut rng, args.engine_args.capacity_blocks, 24)).collect()
        }
    };
    let mut total = CrashReport::default();
    for s in &schedules {
        let (dir, _guard) = workdir(&None)?;
        let config = args.engine_args.config(args.engine_args.dir.clone().unwrap_or(dir))?;
        total.merge(run_crash_suite(kind, &config, s)?);
    }
    for v in &total.violations {
        println!("violation: {v}");
    }
    println!("schedules={} {}", schedules.len(), total.summary());
    if !total.passed() {
        bail!("{} recovery contract violation(s)", total.violations.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Bench(a) => bench(a),
        Command::Attack(a) => attack(a),
        Command::Crash(a) => crash(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn tree_names() {
        assert_eq!(parse_tree("balanced").unwrap(), TreeKind::Balanced);
        assert_eq!(parse_tree("splay:0.5:nowindow").unwrap(), TreeKind::splay(0.5, false));
        assert!(parse_tree("avl").is_err());
    }

    #[test]
    fn sweeps_cross() {
        let p = sweep_points(&["fsync-period=10,100".into(), "bg-rate=1,2,3".into()]).unwrap();
        assert_eq!(p.len(), 6);
        assert!(sweep_points(&["oops".into()]).is_err());
    }
}
