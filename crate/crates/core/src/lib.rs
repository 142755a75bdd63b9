//! Authenticated block storage with partially asynchronous integrity checking.

pub mod attack;
pub mod baselines;
pub mod cache;
pub mod crash;
pub mod crypto;
pub mod disk;
pub mod engine;
pub mod error;
pub mod merkle;
pub mod pac;
pub mod par;
pub mod queue;
pub mod seal;
pub mod storage;
pub mod workload;

pub use baselines::{build_engine, recover_engine, AeadEngine, BatchEngine, PlainEngine, SyncEngine};
pub use engine::{BlockEngine, DeferredFault, EngineKind, EngineMetrics, MemoryReport, WovSample};
pub use error::{AuthFault, Error, FaultKind, IntegrityFault, Result, RollbackFault};
pub use pac::PacEngine;
pub use storage::{Background, EngineConfig};
