//! Attack harness: injects adversarial disk behaviour into a live workload
//! and classifies when, if ever, each injection was detected.

use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::baselines::build_engine;
use crate::disk::{AttackAction, ScriptEntry};
use crate::engine::{BlockEngine, DeferredFault, EngineKind};
use crate::error::{Error, Result};
use crate::storage::EngineConfig;
use crate::workload::{stamped_block, OpKind, OpStream, WorkloadSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    /// The read carrying tampered data returned an error.
    BeforeReturn,
    /// The tampered data was returned and the engine flagged it later.
    AtCheckpoint,
    Undetected,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::BeforeReturn => "detected-before-return",
            Outcome::AtCheckpoint => "detected-at-checkpoint",
            Outcome::Undetected => "undetected",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Injection {
    pub action: AttackAction,
    /// Block whose read exposed the injection.
    pub probe: u64,
    pub outcome: Outcome,
    /// The error of a before-return detection.
    pub error: Option<String>,
    pub integrity_fault: bool,
    /// The read returned data that differs from the last write.
    pub returned_stale: bool,
    pub time_to_detection: Option<Duration>,
}

#[derive(Clone, Debug, Default)]
pub struct AttackReport {
    pub engine: Option<EngineKind>,
    pub injections: Vec<Injection>,
    /// Unattacked reads that failed.
    pub spurious_faults: u64,
    /// Unattacked reads that returned something other than the last write.
    pub consistency_violations: u64,
    /// Actions armed that never fired.
    pub unfired: u64,
    pub ops: u64,
}

impl AttackReport {
    pub fn count(&self, o: Outcome) -> usize {
        self.injections.iter().filter(|i| i.outcome == o).count()
    }

    pub fn detected_before_return(&self) -> usize {
        self.count(Outcome::BeforeReturn)
    }

    pub fn detected_at_checkpoint(&self) -> usize {
        self.count(Outcome::AtCheckpoint)
    }

    pub fn undetected(&self) -> usize {
        self.count(Outcome::Undetected)
    }

    pub fn mean_time_to_detection(&self, o: Outcome) -> Duration {
        let ts: Vec<Duration> =
            self.injections.iter().filter(|i| i.outcome == o).filter_map(|i| i.time_to_detection).collect();
        if ts.is_empty() {
            Duration::ZERO
        } else {
            ts.iter().sum::<Duration>() / ts.len() as u32
        }
    }

    /// Outcomes in injection order, for determinism checks.
    pub fn classifications(&self) -> Vec<(AttackAction, Outcome)> {
        self.injections.iter().map(|i| (i.action, i.outcome)).collect()
    }

    pub fn summary(&self) -> String {
        let name = self.engine.map_or("?", |k| k.name());
        format!(
            "engine={name} injections={} before_return={} at_checkpoint={} undetected={} \
             mean_ttd_checkpoint_ms={:.3} spurious={} violations={} unfired={} ops={}",
            self.injections.len(),
            self.detected_before_return(),
            self.detected_at_checkpoint(),
            self.undetected(),
            self.mean_time_to_detection(Outcome::AtCheckpoint).as_secs_f64() * 1e3,
            self.spurious_faults,
            self.consistency_violations,
            self.unfired,
            self.ops
        )
    }
}

/// Injection awaiting a later verdict.
struct Outstanding {
    index: usize,
    addr: u64,
    returned_at: Instant,
}

struct Harness<'a> {
    engine: &'a mut dyn BlockEngine,
    stream: OpStream,
    fsync_period: u64,
    shadow: HashMap<u64, u64>,
    written: Vec<u64>,
    stamp: u64,
    writes: u64,
    report: AttackReport,
    outstanding: VecDeque<Outstanding>,
    /// Blocks whose last write was dropped and not yet read back.
    dropped: Vec<u64>,
    persistent: Vec<AttackAction>,
}

impl<'a> Harness<'a> {
    fn fired(&self) -> u64 {
        self.engine.disk().stats().fired
    }

    fn expected(&self, addr: u64) -> u64 {
        self.shadow.get(&addr).copied().unwrap_or(0)
    }

    fn attribute_deferred(&mut self, faults: Vec<DeferredFault>) {
        for f in faults {
            match self.outstanding.iter().position(|o| o.addr == f.addr) {
                Some(i) => {
                    let o = self.outstanding.remove(i).unwrap();
                    let inj = &mut self.report.injections[o.index];
                    inj.outcome = Outcome::AtCheckpoint;
                    inj.time_to_detection = Some(f.detected_at.saturating_duration_since(o.returned_at));
                }
                None => self.report.spurious_faults += 1,
            }
        }
    }

    /// Handles the error of an operation that was not itself attacked.
    fn absorb(&mut self, result: Result<()>) -> Result<()> {
        let faults = self.engine.take_deferred_faults();
        let had_faults = !faults.is_empty();
        self.attribute_deferred(faults);
        match result {
            Ok(()) => Ok(()),
            Err(e) if e.is_violation() => {
                if !had_faults {
                    self.report.spurious_faults += 1;
                }
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn write_block(&mut self, addr: u64) -> Result<()> {
        self.stamp += 1;
        let data = stamped_block(self.stamp);
        let before = self.fired();
        let r = self.engine.write(addr, &data);
        if self.shadow.insert(addr, self.stamp).is_none() {
            self.written.push(addr);
        }
        if self.fired() > before && !self.dropped.contains(&addr) {
            self.dropped.push(addr);
        }
        self.absorb(r)
    }

    fn maybe_fsync(&mut self) -> Result<()> {
        self.writes += 1;
        if self.fsync_period > 0 && self.writes.is_multiple_of(self.fsync_period) {
            let r = self.engine.fsync();
            self.absorb(r)?;
        }
        Ok(())
    }

    /// Reads one block, classifying the read if an armed action fired.
    fn read_block(&mut self, addr: u64, pending_action: Option<AttackAction>) -> Result<()> {
        let before = self.fired();
        let start = Instant::now();
        let r = self.engine.read(addr);
        let returned_at = Instant::now();
        let fired = self.fired() > before;
        let dropped_here = self.dropped.iter().position(|&a| a == addr);
        let attacked = fired || dropped_here.is_some();
        let mut faults = self.engine.take_deferred_faults();
        if !attacked {
            let explained = !faults.is_empty();
            self.attribute_deferred(faults);
            match r {
                Ok(data) => {
                    if data[..] != stamped_block(self.expected(addr))[..] {
                        self.report.consistency_violations += 1;
                    }
                }
                Err(e) if e.is_violation() => {
                    if !explained {
                        self.report.spurious_faults += 1;
                    }
                }
                Err(e) => return Err(e),
            }
            return Ok(());
        }
        if let Some(i) = dropped_here {
            self.dropped.remove(i);
        }
        let action = pending_action
            .or_else(|| self.persistent.iter().copied().find(|a| a.addr() == Some(addr)))
            .unwrap_or(AttackAction::DropWrite { addr });
        let mut inj = Injection {
            action,
            probe: addr,
            outcome: Outcome::Undetected,
            error: None,
            integrity_fault: false,
            returned_stale: false,
            time_to_detection: None,
        };
        match r {
            Err(e) if e.is_violation() => {
                if let Some(k) = faults.iter().position(|f| f.addr == addr && f.returned_at >= start) {
                    faults.remove(k);
                }
                inj.outcome = Outcome::BeforeReturn;
                inj.integrity_fault = matches!(e, Error::Integrity(_));
                inj.error = Some(e.to_string());
                inj.time_to_detection = Some(returned_at - start);
            }
            Err(e) => return Err(e),
            Ok(data) => {
                inj.returned_stale = data[..] != stamped_block(self.expected(addr))[..];
            }
        }
        let index = self.report.injections.len();
        let undecided = inj.outcome == Outcome::Undetected;
        self.report.injections.push(inj);
        if undecided {
            self.outstanding.push_back(Outstanding { index, addr, returned_at });
        }
        self.attribute_deferred(faults);
        Ok(())
    }

    fn workload_op(&mut self) -> Result<()> {
        let op = self.stream.next_op();
        self.report.ops += 1;
        match op.kind {
            OpKind::Read => {
                for a in op.block..op.block + op.blocks {
                    self.read_block(a, None)?;
                }
            }
            OpKind::Write => {
                for a in op.block..op.block + op.blocks {
                    self.write_block(a)?;
                }
                self.maybe_fsync()?;
            }
        }
        Ok(())
    }

    /// Rewrites blocks whose on-disk state an injection left stale.
    fn repair(&mut self, addrs: &[u64]) -> Result<()> {
        for &a in addrs {
            self.write_block(a)?;
        }
        Ok(())
    }

    fn inject(&mut self, action: AttackAction, persistent: bool) -> Result<()> {
        let disk = self.engine.disk().clone();
        let before = disk.stats().fired;
        if persistent {
            disk.arm_persistent(action)?;
            self.persistent.push(action);
        } else {
            disk.arm(action)?;
        }
        match action {
            AttackAction::Replay { addr, .. } | AttackAction::Corrupt { addr } => self.read_block(addr, Some(action))?,
            AttackAction::Swap { a, .. } => self.read_block(a, Some(action))?,
            AttackAction::DropWrite { addr } => {
                self.write_block(addr)?;
                self.read_block(addr, Some(action))?;
                self.repair(&[addr])?;
            }
            AttackAction::RollbackAll { steps_back } => {
                let probe = self
                    .written
                    .iter()
                    .rev()
                    .copied()
                    .find(|&a| disk.replayable(a) >= steps_back as usize)
                    .unwrap_or(0);
                self.read_block(probe, Some(action))?;
                let all = self.written.clone();
                self.repair(&all)?;
            }
            AttackAction::DelayBackground { .. } => {}
        }
        if !persistent && !matches!(action, AttackAction::DelayBackground { .. }) {
            if disk.stats().fired == before {
                self.report.unfired += 1;
            }
            disk.disarm_all();
        }
        Ok(())
    }

    fn random_action(&mut self, kind: &str) -> Option<AttackAction> {
        let cap = self.engine.capacity();
        let disk = self.engine.disk().clone();
        let rng = self.stream.rng();
        let pick_written = |rng: &mut rand_chacha::ChaCha8Rng, written: &[u64]| written.choose(rng).copied();
        match kind {
            "replay" => {
                let candidates: Vec<u64> = self.written.iter().copied().filter(|&a| disk.replayable(a) > 0).collect();
                let addr = *candidates.choose(rng)?;
                let steps = rng.gen_range(1..=disk.replayable(addr)) as u32;
                Some(AttackAction::Replay { addr, steps_back: steps })
            }
            "corrupt" => {
                let addr = if rng.gen_bool(0.5) { pick_written(rng, &self.written)? } else { rng.gen_range(0..cap) };
                Some(AttackAction::Corrupt { addr })
            }
            "swap" => {
                if cap < 2 {
                    return None;
                }
                let a = if rng.gen_bool(0.5) { pick_written(rng, &self.written)? } else { rng.gen_range(0..cap) };
                let mut b = rng.gen_range(0..cap - 1);
                if b >= a {
                    b += 1;
                }
                Some(AttackAction::Swap { a, b })
            }
            _ => None,
        }
    }

    fn gap(&mut self, max: u32) -> Result<()> {
        let n = self.stream.rng().gen_range(1..=max);
        for _ in 0..n {
            self.workload_op()?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<AttackReport> {
        self.engine.disk().disarm_all();
        let r = self.engine.fsync();
        self.absorb(r)?;
        let faults = self.engine.take_deferred_faults();
        self.attribute_deferred(faults);
        self.report.engine = Some(self.engine.kind());
        Ok(self.report)
    }
}

/// Options of the attack harness.
#[derive(Clone, Debug)]
pub struct AttackOptions {
    /// Workload operations run before the first injection.
    pub warmup_ops: u64,
    /// Most workload operations between consecutive injections.
    pub max_gap: u32,
}

impl Default for AttackOptions {
    fn default() -> Self {
        Self { warmup_ops: 200, max_gap: 4 }
    }
}

/// Runs `script` against `engine` while it serves `spec`.
pub fn run_attack_on(
    engine: &mut dyn BlockEngine,
    spec: &WorkloadSpec,
    script: &[ScriptEntry],
    opts: &AttackOptions,
) -> Result<AttackReport> {
    if engine.disk().log_depth() == 0 && script.iter().any(needs_log) {
        return Err(Error::Config("replay and rollback need a disk version log (log_depth > 0)".into()));
    }
    let stream = OpStream::new(spec, engine.capacity(), 0)?;
    let mut h = Harness {
        engine,
        stream,
        fsync_period: spec.fsync_period,
        shadow: HashMap::new(),
        written: Vec::new(),
        stamp: 0,
        writes: 0,
        report: AttackReport::default(),
        outstanding: VecDeque::new(),
        dropped: Vec::new(),
        persistent: Vec::new(),
    };
    for _ in 0..opts.warmup_ops {
        h.workload_op()?;
    }
    for entry in script {
        match entry {
            ScriptEntry::Arm { at_op, action, persistent } => {
                if let Some(at) = at_op {
                    while h.report.ops < *at {
                        h.workload_op()?;
                    }
                }
                h.inject(*action, *persistent)?;
                if *persistent {
                    h.gap(opts.max_gap)?;
                }
            }
            ScriptEntry::Random { count, kinds } => {
                let mut done = 0;
                while done < *count {
                    h.gap(opts.max_gap)?;
                    let kind = kinds.choose(h.stream.rng()).cloned().unwrap_or_else(|| "replay".into());
                    if let Some(action) = h.random_action(&kind) {
                        h.inject(action, false)?;
                        done += 1;
                    }
                }
            }
        }
    }
    h.finish()
}

fn needs_log(e: &ScriptEntry) -> bool {
    match e {
        ScriptEntry::Arm { action, .. } => {
            matches!(action, AttackAction::Replay { .. } | AttackAction::RollbackAll { .. })
        }
        ScriptEntry::Random { kinds, .. } => kinds.iter().any(|k| k == "replay"),
    }
}

/// Builds the named engine and runs the attack script on it.
pub fn run_attack_suite(
    kind: EngineKind,
    config: &EngineConfig,
    spec: &WorkloadSpec,
    script: &[ScriptEntry],
    opts: &AttackOptions,
) -> Result<AttackReport> {
    let mut config = config.clone();
    if config.log_depth == 0 {
        config.log_depth = 4;
    }
    let mut engine = build_engine(kind, config)?;
    run_attack_on(engine.as_mut(), spec, script, opts)
}
