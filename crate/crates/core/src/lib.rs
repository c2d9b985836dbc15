//! Deterministic single-process simulator for communication-efficient
//! distributed gradient methods in the parameter-server setting.
//!
//! A server holds the iterate `theta` and an aggregated gradient; `M` workers
//! each hold a shard of data and the gradient they last uploaded. Full
//! gradient descent makes every worker recompute and upload every round.
//! The lazily aggregated variants (`lag_wk`, `lag_ps`) let a worker reuse its
//! stale gradient unless a trigger condition detects that the gradient has
//! changed enough to matter, which cuts uploads without changing the
//! iteration complexity class. Cyclic and importance-sampled incremental
//! baselines (`cyc_iag`, `num_iag`) update one worker per round.
//!
//! Everything is deterministic: same seed and configuration produce
//! bit-identical traces and communication ledgers, with or without the
//! `parallel` feature (worker evaluations fan out via rayon but are reduced
//! in worker-id order).

pub mod analysis;
pub mod datagen;
pub mod engine;
pub mod losses;
pub mod numeric;
pub mod triggers;

pub use datagen::{gen_synthetic, CsvSchema, PartitionSpec, SyntheticSpec};
pub use engine::{
    build_workers, run, uploads_to_reach, CommLedger, LedgerEntry, Method, RunConfig, RunError,
    RunOutput, ServerState, Trace, TraceRow, WorkerNode,
};
pub use losses::{GlobalSmoothness, LossKind, LossModel, SmoothnessCert};
pub use numeric::{DataMatrix, GramMatrix, ModelVector, NumericsError};
pub use triggers::{schedule_theorem1, LagWindow, Schedule, TriggerParams};

