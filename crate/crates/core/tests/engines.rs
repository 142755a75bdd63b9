//! End-to-end behaviour of every engine through the public API.

use std::collections::HashMap;
use std::time::Duration;

use pacstore::attack::{run_attack_suite, AttackOptions};
use pacstore::crash::{parse_crash_schedule, run_crash_suite};
use pacstore::disk::{parse_attack_script, AttackAction};
use pacstore::workload::{fill_block, WorkloadSpec};
use pacstore::{build_engine, recover_engine, Background, BlockEngine, EngineConfig, EngineKind, Error, PacEngine};
use proptest::prelude::*;

fn config(dir: &std::path::Path, capacity: u64) -> EngineConfig {
    let mut c = EngineConfig::new(dir, capacity);
    c.seal_delay = Duration::from_micros(100);
    c.queue_capacity = 16;
    c.batch_size = 8;
    c
}

fn block(stamp: u64) -> Box<[u8; 4096]> {
    let mut b = Box::new([0u8; 4096]);
    fill_block(&mut b[..], stamp);
    b
}

#[derive(Debug, Clone)]
enum Op {
    Write(u64, u64),
    Read(u64),
    Fsync,
}

fn op(capacity: u64) -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..capacity, 1..u64::MAX).prop_map(|(a, s)| Op::Write(a, s)),
        4 => (0..capacity).prop_map(Op::Read),
        1 => Just(Op::Fsync),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_engine_reads_its_latest_write(ops in proptest::collection::vec(op(48), 1..120)) {
        for kind in EngineKind::ALL {
            let dir = tempfile::tempdir().unwrap();
            let mut engine = build_engine(kind, config(dir.path(), 48)).unwrap();
            let mut model: HashMap<u64, u64> = HashMap::new();
            for op in &ops {
                match *op {
                    Op::Write(a, s) => {
                        engine.write(a, &block(s)).unwrap();
                        model.insert(a, s);
                    }
                    Op::Read(a) => {
                        let got = engine.read(a).unwrap();
                        let want = block(model.get(&a).copied().unwrap_or(0));
                        prop_assert!(got[..] == want[..], "{kind} addr {a}");
                    }
                    Op::Fsync => engine.fsync().unwrap(),
                }
            }
            engine.fsync().unwrap();
        }
    }
}

#[test]
fn pac_restart_restores_durable_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 128);
    let mut engine = PacEngine::create(cfg.clone()).unwrap();
    for a in 0..128 {
        engine.write(a, &block(a + 1)).unwrap();
    }
    engine.fsync().unwrap();
    drop(engine);
    let mut engine = PacEngine::recover(cfg).unwrap();
    for a in 0..128 {
        assert_eq!(engine.read(a).unwrap()[..], block(a + 1)[..]);
    }
}

#[test]
fn recovery_rejects_a_rewound_image() {
    for kind in [EngineKind::Sync, EngineKind::Pac] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), 32);
        cfg.log_depth = 4;
        let mut engine = build_engine(kind, cfg.clone()).unwrap();
        for a in 0..32 {
            engine.write(a, &block(a + 1)).unwrap();
        }
        engine.write(3, &block(99)).unwrap();
        engine.fsync().unwrap();
        let disk = engine.disk().clone();
        drop(engine);
        disk.arm(AttackAction::RollbackAll { steps_back: 1 }).unwrap();
        disk.read(0).unwrap();
        let err = recover_engine(kind, cfg, disk).err().expect("rewound image must fail recovery");
        assert!(err.is_violation(), "{kind}: {err}");
    }
}

#[test]
fn replay_detection_depends_on_engine() {
    let script = parse_attack_script("random 40 replay").unwrap();
    let spec = WorkloadSpec { read_ratio: 0.5, io_size: 4096, ops: 400, warmup_ops: 0, seed: 3, ..WorkloadSpec::default() };
    let opts = AttackOptions { warmup_ops: 64, max_gap: 3 };
    let mut summary = HashMap::new();
    for kind in [EngineKind::Aead, EngineKind::Sync, EngineKind::Pac] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), 64);
        cfg.log_depth = 4;
        let r = run_attack_suite(kind, &cfg, &spec, &script, &opts).unwrap();
        assert_eq!(r.injections.len(), 40);
        assert_eq!(r.spurious_faults, 0);
        summary.insert(kind, (r.detected_before_return(), r.undetected()));
    }
    assert_eq!(summary[&EngineKind::Aead], (0, 40));
    assert_eq!(summary[&EngineKind::Sync], (40, 0));
    assert_eq!(summary[&EngineKind::Pac], (40, 0));
}

#[test]
fn scripted_crash_schedule_recovers() {
    let schedule = parse_crash_schedule(
        "write 20\nfsync\nwrite 5\ncrash\nrecover\nwrite 10\nfsync\nwrite 4\nrollback 1\nrecover\n",
    )
    .unwrap();
    for kind in [EngineKind::Sync, EngineKind::Pac] {
        let dir = tempfile::tempdir().unwrap();
        let r = run_crash_suite(kind, &config(dir.path(), 32), &schedule).unwrap();
        assert!(r.passed(), "{kind}: {}", r.summary());
        assert_eq!(r.counter_mismatches, 1, "{kind}: {}", r.summary());
    }
}

#[test]
fn out_of_range_address_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 8);
    cfg.background = Background::Manual;
    for kind in EngineKind::ALL {
        let sub = dir.path().join(kind.name());
        let mut c = cfg.clone();
        c.dir = sub.clone();
        std::fs::create_dir_all(&sub).unwrap();
        let mut engine = build_engine(kind, c).unwrap();
        assert!(matches!(engine.read(8), Err(Error::OutOfRange { .. }) | Err(Error::Config(_))), "{kind}");
    }
}
