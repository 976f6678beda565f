//! Trace replay, corpus generation, detection reports and latency benches.

pub mod bench;
pub mod corpus;
pub mod report;
pub mod trace;

use std::sync::Arc;

use crate::engine::{BondStore, Engine, EngineConfig};
use crate::vm::PolicyStore;

pub use report::{DetectionReport, Summary, TraceResult};
pub use trace::{Category, Trace, TraceError, TraceMeta, TraceRecord};

/// Feeds every record of `trace`, in order, to a fresh engine.
pub fn replay(
    trace: &Trace,
    store: Arc<PolicyStore>,
    bonds: BondStore,
    config: EngineConfig,
) -> (TraceResult, Engine) {
    let mut engine = Engine::new(store, bonds, config);
    for r in &trace.records {
        engine.process(r.seq, r.dir, r.hook, r.peer, &r.payload);
    }
    (TraceResult::evaluate(trace, engine.alerts()), engine)
}

/// Replays each trace independently, every one starting from a copy of
/// `bonds`.
pub fn replay_all(
    traces: &[Trace],
    store: &Arc<PolicyStore>,
    bonds: &BondStore,
    config: &EngineConfig,
) -> DetectionReport {
    let results = traces
        .iter()
        .map(|t| {
            let mut b = bonds.clone();
            b.set_path(None);
            replay(t, store.clone(), b, config.clone()).0
        })
        .collect();
    DetectionReport::new(results)
}
