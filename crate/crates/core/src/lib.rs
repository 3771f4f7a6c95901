//! Diskless, in-memory checkpoint/restart for block-structured simulations,
//! running on a deterministic simulated message-passing cluster with
//! ULFM-style failure semantics.
//!
//! Every rank keeps its own snapshot and one partner's snapshot in memory.
//! Commits are guarded by a collective handshake, and after a failure the
//! survivors restore the lost data locally and rebalance.

pub mod distribution;
pub mod grid;
pub mod metrics;
pub mod planner;
pub mod recovery;
pub mod runtime;
pub mod scenario;
pub mod snapshot;
pub mod workload;

pub use distribution::{pairwise_plan, DistributionPlan, DistributionStrategy};
pub use grid::{partition_domain, BlockId, BlockMap, DomainSpec, Face, Rank};
pub use metrics::{Event, EventKind, Outcome, Phase, SimulationReport};
pub use recovery::{
    reference_checksum, resolve_recovery_rank, simulate_run, CheckpointConfig, RecoveryContext, RunConfig,
};
pub use runtime::{CommError, CostModel, FaultSchedule, FaultTrigger, ProcId, RankHandle, SimError, Victim};
pub use scenario::{run_scenario, ScenarioConfig, ScenarioError};
