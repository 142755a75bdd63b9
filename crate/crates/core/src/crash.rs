//! Crash and rollback harness for the recoverable engines.

use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{build_engine, recover_engine};
use crate::disk::AdversarialDisk;
use crate::engine::{BlockEngine, EngineKind};
use crate::error::{Error, Result, RollbackFault};
use crate::storage::EngineConfig;
use crate::workload::stamped_block;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashStep {
    /// `count` writes to random blocks.
    Write { count: u64 },
    WriteAt { addr: u64 },
    Fsync,
    /// Power loss: the disk returns to its state at the last fsync.
    Crash,
    /// Power loss after every write reached the image, without any of
    /// the metadata written since the last fsync.
    TornCrash,
    /// Crash, then restore the image and its metadata files from
    /// `epochs` fsyncs before the last.
    Rollback { epochs: usize },
    /// Crash, then restore only the image from `epochs` fsyncs before the
    /// last.
    RollbackImage { epochs: usize },
    Recover,
}

/// Parses one step per line; `#` starts a comment.
pub fn parse_crash_schedule(text: &str) -> Result<Vec<CrashStep>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        let num = |k: usize| -> Result<u64> {
            let w = words.get(k).ok_or_else(|| err(format!("`{}` needs an argument", words[0])))?;
            w.parse().map_err(|_| err(format!("bad number `{w}`")))
        };
        let arity = |n: usize| -> Result<()> {
            if words.len() != n + 1 {
                return Err(err(format!("`{}` takes {n} argument(s)", words[0])));
            }
            Ok(())
        };
        let step = match words[0] {
            "write" => {
                arity(1)?;
                CrashStep::Write { count: num(1)? }
            }
            "write_at" => {
                arity(1)?;
                CrashStep::WriteAt { addr: num(1)? }
            }
            "fsync" => {
                arity(0)?;
                CrashStep::Fsync
            }
            "crash" => {
                arity(0)?;
                CrashStep::Crash
            }
            "torn_crash" => {
                arity(0)?;
                CrashStep::TornCrash
            }
            "rollback" | "rollback_image" => {
                arity(1)?;
                let epochs = num(1)? as usize;
                if epochs == 0 {
                    return Err(err("rollback needs at least one epoch".into()));
                }
                if words[0] == "rollback" {
                    CrashStep::Rollback { epochs }
                } else {
                    CrashStep::RollbackImage { epochs }
                }
            }
            "recover" => {
                arity(0)?;
                CrashStep::Recover
            }
            other => return Err(err(format!("unknown step `{other}`"))),
        };
        out.push(step);
    }
    Ok(out)
}

pub fn load_crash_schedule(path: &Path) -> Result<Vec<CrashStep>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_crash_schedule(&text)
}

/// A random schedule in which every crash is followed by a recovery and
/// every rollback reaches at least one sealed epoch back.
pub fn random_crash_schedule(rng: &mut impl Rng, capacity: u64, events: usize) -> Vec<CrashStep> {
    let mut steps = Vec::new();
    let mut fsyncs = 0usize;
    for _ in 0..events {
        match rng.gen_range(0..10) {
            0..=3 => steps.push(CrashStep::Write { count: rng.gen_range(1..=16) }),
            4 => steps.push(CrashStep::WriteAt { addr: rng.gen_range(0..capacity) }),
            5 | 6 => {
                steps.push(CrashStep::Fsync);
                fsyncs += 1;
            }
            k => {
                let crash = match k {
                    7 => CrashStep::Crash,
                    8 => CrashStep::TornCrash,
                    _ if fsyncs == 0 => CrashStep::Crash,
                    _ => {
                        let epochs = rng.gen_range(1..=fsyncs.min(3));
                        if rng.gen_bool(0.5) {
                            CrashStep::Rollback { epochs }
                        } else {
                            CrashStep::RollbackImage { epochs }
                        }
                    }
                };
                steps.push(crash);
                steps.push(CrashStep::Recover);
            }
        }
    }
    if fsyncs == 0 {
        steps.push(CrashStep::Fsync);
        steps.push(CrashStep::Write { count: 1 });
    }
    steps.push(CrashStep::Fsync);
    steps.push(CrashStep::Write { count: 3 });
    steps.push(CrashStep::Rollback { epochs: 1 });
    steps.push(CrashStep::Recover);
    steps
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Expect {
    Exact,
    ExactOrFault,
    CounterMismatch,
}

#[derive(Clone, Debug, Default)]
pub struct CrashReport {
    pub steps: usize,
    pub recoveries: u64,
    /// Recoveries whose state matched the last fsync exactly.
    pub exact_recoveries: u64,
    pub faults_raised: u64,
    pub counter_mismatches: u64,
    pub rollbacks: u64,
    /// Contract breaches, one message each.
    pub violations: Vec<String>,
}

impl CrashReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: CrashReport) {
        self.steps += other.steps;
        self.recoveries += other.recoveries;
        self.exact_recoveries += other.exact_recoveries;
        self.faults_raised += other.faults_raised;
        self.counter_mismatches += other.counter_mismatches;
        self.rollbacks += other.rollbacks;
        self.violations.extend(other.violations);
    }

    pub fn summary(&self) -> String {
        format!(
            "steps={} recoveries={} exact={} faults={} counter_mismatches={} rollbacks={} violations={}",
            self.steps,
            self.recoveries,
            self.exact_recoveries,
            self.faults_raised,
            self.counter_mismatches,
            self.rollbacks,
            self.violations.len()
        )
    }
}

struct Durable {
    token: u64,
    state: Vec<u64>,
}

struct Run {
    kind: EngineKind,
    config: EngineConfig,
    disk: Arc<AdversarialDisk>,
    engine: Option<Box<dyn BlockEngine>>,
    live: Vec<u64>,
    history: Vec<Durable>,
    expect: Option<Expect>,
    stamp: u64,
    rng: ChaCha8Rng,
    report: CrashReport,
}

impl Run {
    fn engine(&mut self, step: usize) -> Result<&mut Box<dyn BlockEngine>> {
        self.engine.as_mut().ok_or_else(|| Error::Config(format!("step {step}: engine is down; add `recover`")))
    }

    fn write(&mut self, step: usize, addr: u64) -> Result<()> {
        self.stamp += 1;
        let data = stamped_block(self.stamp);
        self.engine(step)?.write(addr, &data)?;
        self.live[addr as usize] = self.stamp;
        Ok(())
    }

    fn mark_durable(&mut self) -> Result<()> {
        let token = self.disk.crash_snapshot()?;
        self.history.push(Durable { token, state: self.live.clone() });
        Ok(())
    }

    fn last(&self) -> &Durable {
        self.history.last().expect("creation is durable")
    }

    fn go_down(&mut self, step: usize, expect: Expect) -> Result<()> {
        if self.engine.take().is_none() {
            return Err(Error::Config(format!("step {step}: engine is already down")));
        }
        self.expect = Some(expect);
        Ok(())
    }

    fn epoch(&self, step: usize, epochs: usize) -> Result<u64> {
        let n = self.history.len();
        if epochs >= n {
            return Err(Error::Config(format!("step {step}: only {} earlier epochs available", n - 1)));
        }
        Ok(self.history[n - 1 - epochs].token)
    }

    /// Reads every block through the recovered engine and compares with
    /// the last durable state.
    fn check_state(&mut self, step: usize) -> Result<bool> {
        let expected = self.last().state.clone();
        let engine = self.engine.as_mut().expect("engine is up");
        for (addr, &stamp) in expected.iter().enumerate() {
            match engine.read(addr as u64) {
                Ok(data) if data[..] == stamped_block(stamp)[..] => {}
                Ok(_) => {
                    self.report.violations.push(format!("step {step}: block {addr} differs from the last fsync"));
                    return Ok(false);
                }
                Err(e) => {
                    self.report.violations.push(format!("step {step}: block {addr} unreadable after recovery: {e}"));
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    fn recover(&mut self, step: usize) -> Result<()> {
        let expect = self.expect.take().ok_or_else(|| Error::Config(format!("step {step}: nothing to recover")))?;
        self.report.recoveries += 1;
        let result = recover_engine(self.kind, self.config.clone(), self.disk.clone());
        let ok = match (result, expect) {
            (Ok(engine), Expect::CounterMismatch) => {
                drop(engine);
                self.report.violations.push(format!("step {step}: rolled-back state recovered without a fault"));
                false
            }
            (Ok(engine), _) => {
                self.engine = Some(engine);
                if self.check_state(step)? {
                    self.report.exact_recoveries += 1;
                }
                true
            }
            (Err(Error::Rollback(RollbackFault::CounterMismatch { .. })), e) => {
                self.report.faults_raised += 1;
                self.report.counter_mismatches += 1;
                if e == Expect::Exact {
                    self.report.violations.push(format!("step {step}: clean crash reported a counter mismatch"));
                }
                false
            }
            (Err(e), expect) if e.is_violation() || matches!(e, Error::MetadataCorrupt(_)) => {
                self.report.faults_raised += 1;
                match expect {
                    Expect::Exact => self.report.violations.push(format!("step {step}: clean crash faulted: {e}")),
                    Expect::CounterMismatch => {
                        self.report.violations.push(format!("step {step}: rollback raised {e}, not a counter mismatch"))
                    }
                    Expect::ExactOrFault => {}
                }
                false
            }
            (Err(e), _) => return Err(e),
        };
        if !ok {
            // Put back the honest durable state and recover from it.
            let token = self.last().token;
            self.disk.crash_restore(token)?;
            match recover_engine(self.kind, self.config.clone(), self.disk.clone()) {
                Ok(engine) => {
                    self.engine = Some(engine);
                    self.report.recoveries += 1;
                    if self.check_state(step)? {
                        self.report.exact_recoveries += 1;
                    }
                }
                Err(e) => {
                    self.report.violations.push(format!("step {step}: recovery from the durable state failed: {e}"));
                    return Err(e);
                }
            }
        }
        self.live = self.last().state.clone();
        // Recovery seals a new epoch; it becomes the durable point.
        self.mark_durable()
    }

    fn step(&mut self, i: usize, step: CrashStep) -> Result<()> {
        let cap = self.config.capacity_blocks;
        match step {
            CrashStep::Write { count } => {
                for _ in 0..count {
                    let a = self.rng.gen_range(0..cap);
                    self.write(i, a)?;
                }
            }
            CrashStep::WriteAt { addr } => {
                if addr >= cap {
                    return Err(Error::OutOfRange { addr, capacity: cap });
                }
                self.write(i, addr)?;
            }
            CrashStep::Fsync => {
                self.engine(i)?.fsync()?;
                self.mark_durable()?;
            }
            CrashStep::Crash => {
                self.go_down(i, Expect::Exact)?;
                self.disk.crash_restore(self.last().token)?;
            }
            CrashStep::TornCrash => {
                self.go_down(i, Expect::ExactOrFault)?;
            }
            CrashStep::Rollback { epochs } => {
                let token = self.epoch(i, epochs)?;
                self.go_down(i, Expect::CounterMismatch)?;
                self.disk.crash_restore(token)?;
                self.report.rollbacks += 1;
            }
            CrashStep::RollbackImage { epochs } => {
                let token = self.epoch(i, epochs)?;
                self.go_down(i, Expect::ExactOrFault)?;
                self.disk.crash_restore(self.last().token)?;
                self.disk.restore_image_only(token)?;
                self.report.rollbacks += 1;
            }
            CrashStep::Recover => self.recover(i)?,
        }
        self.report.steps += 1;
        Ok(())
    }
}

/// Runs `schedule` against a fresh `kind` engine in `config.dir`.
pub fn run_crash_suite(kind: EngineKind, config: &EngineConfig, schedule: &[CrashStep]) -> Result<CrashReport> {
    if !matches!(kind, EngineKind::Pac | EngineKind::Sync) {
        return Err(Error::Config(format!("the {kind} engine does not support recovery")));
    }
    let engine = build_engine(kind, config.clone())?;
    let disk = engine.disk().clone();
    let mut run = Run {
        kind,
        config: config.clone(),
        disk,
        engine: Some(engine),
        live: vec![0; config.capacity_blocks as usize],
        history: Vec::new(),
        expect: None,
        stamp: 0,
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x0063_7261_7368),
        report: CrashReport::default(),
    };
    run.mark_durable()?;
    for (i, &s) in schedule.iter().enumerate() {
        run.step(i + 1, s)?;
    }
    Ok(run.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn config(dir: &Path) -> EngineConfig {
        let mut c = EngineConfig::new(dir, 32);
        c.seal_delay = Duration::from_micros(200);
        c
    }

    fn run(text: &str) -> CrashReport {
        let d = tempfile::tempdir().unwrap();
        run_crash_suite(EngineKind::Pac, &config(d.path()), &parse_crash_schedule(text).unwrap()).unwrap()
    }

    #[test]
    fn crash_after_fsync_recovers_exactly() {
        let r = run("write 20\nfsync\ncrash\nrecover\n");
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.exact_recoveries, 1);
    }

    #[test]
    fn unsynced_writes_are_lost() {
        let r = run("write 20\nfsync\nwrite 10\ncrash\nrecover\nwrite 1\nfsync\n");
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.exact_recoveries, 1);
    }

    #[test]
    fn rollback_is_a_counter_mismatch() {
        let r = run("write 5\nfsync\nwrite 5\nfsync\nrollback 1\nrecover\n");
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.counter_mismatches, 1);
        assert_eq!(r.exact_recoveries, 1, "repair recovers the honest state");
    }

    #[test]
    fn image_rollback_and_torn_crash_fault() {
        let r = run("write 5\nfsync\nwrite 5\nfsync\nrollback_image 1\nrecover\nwrite 4\ntorn_crash\nrecover\n");
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.faults_raised, 2);
        assert_eq!(r.counter_mismatches, 0);
    }

    #[test]
    fn torn_crash_without_writes_recovers() {
        let r = run("write 5\nfsync\ntorn_crash\nrecover\n");
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.faults_raised, 0);
    }

    #[test]
    fn repeated_crashes_after_recovery() {
        let r = run("write 3\nfsync\ncrash\nrecover\ncrash\nrecover\nwrite 2\ncrash\nrecover\n");
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.exact_recoveries, 3);
    }

    #[test]
    fn random_schedules_hold_for_both_engines() {
        for kind in [EngineKind::Pac, EngineKind::Sync] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..8 {
                let d = tempfile::tempdir().unwrap();
                let s = random_crash_schedule(&mut rng, 32, 20);
                let r = run_crash_suite(kind, &config(d.path()), &s).unwrap();
                assert!(r.passed(), "{kind}: {:?} in {s:?}", r.violations);
                assert!(r.counter_mismatches >= 1);
            }
        }
    }

    #[test]
    fn schedule_errors() {
        assert!(parse_crash_schedule("bogus").is_err());
        assert!(parse_crash_schedule("rollback 0").is_err());
        assert!(parse_crash_schedule("write").is_err());
        let d = tempfile::tempdir().unwrap();
        let c = config(d.path());
        let s = parse_crash_schedule("rollback 1").unwrap();
        assert!(run_crash_suite(EngineKind::Pac, &c, &s).is_err());
        let s = parse_crash_schedule("crash\nwrite 1").unwrap();
        assert!(run_crash_suite(EngineKind::Pac, &c, &s).is_err());
        assert!(run_crash_suite(EngineKind::Batch, &c, &[]).is_err());
    }
}
