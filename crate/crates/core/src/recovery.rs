//! Resilient checkpoint commit, recovery rank resolution, the fault-handling
//! main loop, and post-recovery rebalancing.
//!
//! Each rank runs [`run_with_recovery`]. Any communication error unwinds the
//! current step to the recovery pipeline: revoke, shrink, agree on the last
//! committed step, restore locally, rebalance. A fault during recovery simply
//! restarts the pipeline; the read-only snapshot half is never modified by it.

use thiserror::Error;

use crate::distribution::{exchange_snapshots, pairwise_plan, DistributionStrategy};
use crate::grid::{contiguous_map, partition_domain, BlockId, BlockMap, DomainSpec, GridError, Rank};
use crate::metrics::{EventKind, Outcome, Phase, ResidentGauge, SimulationReport};
use crate::runtime::{
    run_simulation, CostModel, FaultSchedule, HandshakeVerdict, ProcId, RankHandle, SimError, SimOptions, Tag,
    TraceEntry,
};
use crate::snapshot::{decode_snapshot, EntityHooks, Registry, SnapshotError, SnapshotHalf, SnapshotSet};
use crate::workload::{
    decode_blocks, encode_blocks, exchange_ghosts, fill_local_halos, init_block, state_checksum, BlockData,
    WorkloadError, MAX_STABLE_DT,
};

/// Vote of a rank that never committed.
pub const NO_COMMIT: u64 = u64::MAX - 1;
/// Vote of a rank whose only snapshot half was being overwritten.
pub const INVALID_COMMIT: u64 = u64::MAX;

#[derive(Debug, Clone, Copy)]
pub struct CheckpointConfig {
    pub interval_steps: u64,
    pub strategy: DistributionStrategy,
    pub resilient_double_buffer: bool,
}

impl CheckpointConfig {
    pub fn new(interval_steps: u64) -> Self {
        Self {
            interval_steps,
            strategy: pairwise_plan,
            resilient_double_buffer: true,
        }
    }

    pub fn non_resilient(mut self) -> Self {
        self.resilient_double_buffer = false;
        self
    }
}

/// Replicated bookkeeping stored beside each committed snapshot: who owned
/// what, and which processes formed the communicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitContext {
    pub map: BlockMap,
    pub members: Vec<ProcId>,
}

/// Inputs for resolving where an old rank's data now lives.
#[derive(Debug, Clone)]
pub struct RecoveryContext {
    pub old_nprocs: usize,
    /// Old rank to current rank; `None` if that process died.
    pub reassignment: Vec<Option<Rank>>,
    pub strategy: DistributionStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("snapshot of rank {old_rank} is lost: it and its backup holder {backup} both failed")]
pub struct Unrecoverable {
    pub old_rank: Rank,
    pub backup: Rank,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Unrecoverable(#[from] Unrecoverable),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("no committed snapshot to restore")]
    NoCommit,
}

/// New rank that takes over `old_rank`'s data: the process itself if it
/// survived, otherwise the rank that held its copy.
pub fn resolve_recovery_rank(old_rank: Rank, ctx: &RecoveryContext) -> Result<Rank, Unrecoverable> {
    if let Some(r) = ctx.reassignment[old_rank] {
        return Ok(r);
    }
    // For the pairwise plan this is (old_rank + old_nprocs / 2) mod old_nprocs.
    let backup = (ctx.strategy)(old_rank, ctx.old_nprocs).send_to_or(old_rank);
    match ctx.reassignment[backup] {
        Some(r) if backup != old_rank => Ok(r),
        _ => Err(Unrecoverable { old_rank, backup }),
    }
}

/// Per-rank live state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankState {
    pub blocks: Vec<BlockData>,
    pub step: u64,
}

impl RankState {
    /// Payload bytes of the live state as the entities serialize it.
    pub fn live_bytes(&self) -> usize {
        4 + self.blocks.iter().map(BlockData::encoded_len).sum::<usize>() + 8
    }
}

/// The two entities every rank registers: its blocks and the step counter.
/// Restoring appends blocks, so several snapshots can be restored in turn.
pub fn entity_registry() -> Registry<RankState> {
    let mut reg = Registry::new();
    reg.register(EntityHooks::new(
        "blocks",
        |s: &RankState| Ok(encode_blocks(&s.blocks)),
        |s: &mut RankState, bytes, ctx| {
            let blocks = decode_blocks(bytes, ctx.origin_rank as Rank).map_err(|e| e.to_string())?;
            s.blocks.extend(blocks);
            Ok(())
        },
    ))
    .expect("fresh registry");
    reg.register(EntityHooks::new(
        "step_timer",
        |s: &RankState| Ok(s.step.to_le_bytes().to_vec()),
        |s: &mut RankState, bytes, _| {
            let raw: [u8; 8] = bytes.try_into().map_err(|_| "step counter must be 8 bytes".to_string())?;
            s.step = u64::from_le_bytes(raw);
            Ok(())
        },
    ))
    .expect("fresh registry");
    reg
}

/// What a rank got back from [`restore_from_checkpoint`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestoreSummary {
    pub step: u64,
    /// Old ranks whose snapshots this rank restored, ascending.
    pub restored_origins: Vec<Rank>,
}

/// Restore every held committed snapshot that maps to this rank. Purely local.
/// Fails with `Unrecoverable` if any old rank's data is gone, on every rank
/// alike.
pub fn restore_from_checkpoint(
    rt: &RankHandle,
    registry: &Registry<RankState>,
    half: &SnapshotHalf<CommitContext>,
    ctx: &RecoveryContext,
    state: &mut RankState,
) -> Result<RestoreSummary, RecoveryError> {
    if !half.valid {
        return Err(RecoveryError::NoCommit);
    }
    for old in 0..ctx.old_nprocs {
        resolve_recovery_rank(old, ctx)?;
    }
    let me = rt.rank();
    let mut restored = RankState::default();
    let mut origins = Vec::new();
    for bytes in half.held() {
        let snapshot = decode_snapshot(bytes)?;
        let origin = snapshot.origin_rank as Rank;
        if resolve_recovery_rank(origin, ctx)? != me {
            continue;
        }
        rt.memcopy_cost(bytes.len());
        registry.restore(&mut restored, &snapshot)?;
        origins.push(origin);
    }
    restored.blocks.sort_by_key(|b| b.id);
    origins.sort_unstable();
    *state = restored;
    Ok(RestoreSummary {
        step: state.step,
        restored_origins: origins,
    })
}

/// Ownership after recovery: each block goes to whoever took over its owner.
pub fn remap_ownership(map: &BlockMap, ctx: &RecoveryContext, new_size: usize) -> Result<BlockMap, Unrecoverable> {
    let owners = map
        .owners()
        .iter()
        .map(|&old| resolve_recovery_rank(old, ctx))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BlockMap::from_owners(owners, new_size))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Migration {
    pub block: BlockId,
    pub from: Rank,
    pub to: Rank,
}

/// Move the lowest-id block of the most loaded rank to the least loaded rank
/// until loads differ by at most one. Ties go to the lowest rank.
pub fn rebalance_greedy(map: &BlockMap) -> (Vec<Migration>, BlockMap) {
    let mut map = map.clone();
    let mut moves = Vec::new();
    loop {
        let loads = map.loads();
        if loads.len() < 2 {
            break;
        }
        let (mut hi, mut lo) = (0, 0);
        for (r, &l) in loads.iter().enumerate() {
            if l > loads[hi] {
                hi = r;
            }
            if l < loads[lo] {
                lo = r;
            }
        }
        if loads[hi] - loads[lo] <= 1 {
            break;
        }
        let block = map.blocks_of(hi)[0];
        map.move_block(block, lo);
        moves.push(Migration { block, from: hi, to: lo });
    }
    (moves, map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointOutcome {
    Committed,
    RolledBack,
}

/// Everything a rank needs to run and checkpoint the workload.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub spec: DomainSpec,
    pub total_steps: u64,
    pub dt: f64,
    pub seed: u64,
    pub checkpoint: CheckpointConfig,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("checkpoint interval must be at least one step")]
    ZeroInterval,
    #[error("the domain has {blocks} blocks, fewer than the {procs} processes")]
    TooFewBlocks { blocks: u64, procs: usize },
    #[error("distribution strategy is inconsistent for {0} processes")]
    InconsistentStrategy(usize),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.spec.validate()?;
        if !(self.dt > 0.0 && self.dt <= MAX_STABLE_DT) {
            return Err(WorkloadError::UnstableTimeStep(self.dt).into());
        }
        if self.checkpoint.interval_steps == 0 {
            return Err(ConfigError::ZeroInterval);
        }
        if self.spec.num_blocks() < self.spec.num_processes as u64 {
            return Err(ConfigError::TooFewBlocks {
                blocks: self.spec.num_blocks(),
                procs: self.spec.num_processes,
            });
        }
        if !crate::distribution::is_consistent(self.checkpoint.strategy, self.spec.num_processes) {
            return Err(ConfigError::InconsistentStrategy(self.spec.num_processes));
        }
        Ok(())
    }
}

/// How one rank's program ended.
#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    pub outcome: Outcome,
    pub blocks: Vec<BlockData>,
    pub step: u64,
}

struct Fault;

enum RecoverFailure {
    Retry,
    Lost,
}

struct Worker {
    rt: RankHandle,
    cfg: RunConfig,
    registry: Registry<RankState>,
    snaps: SnapshotSet<CommitContext>,
    state: RankState,
    map: BlockMap,
}

impl Worker {
    fn new(rt: RankHandle, cfg: RunConfig) -> Self {
        Self {
            snaps: SnapshotSet::new(cfg.checkpoint.resilient_double_buffer),
            registry: entity_registry(),
            state: RankState::default(),
            map: BlockMap::from_owners(Vec::new(), 0),
            rt,
            cfg,
        }
    }

    fn init_blocks(&mut self, map: BlockMap) {
        let me = self.rt.rank();
        self.state.blocks = map
            .blocks_of(me)
            .iter()
            .map(|&id| init_block(id, &self.cfg.spec, self.cfg.seed, me).expect("validated domain"))
            .collect();
        self.state.step = 0;
        self.map = map;
    }

    async fn run(mut self) -> RankResult {
        {
            let _g = self.rt.phase(Phase::Init, 0).await;
            let map = partition_domain(&self.cfg.spec).expect("validated domain");
            self.init_blocks(map);
        }
        loop {
            if self.advance().await.is_ok() && self.finalize().await {
                return RankResult {
                    outcome: Outcome::Completed,
                    blocks: std::mem::take(&mut self.state.blocks),
                    step: self.state.step,
                };
            }
            if self.recover().await.is_err() {
                return RankResult {
                    outcome: Outcome::DataLoss,
                    blocks: Vec::new(),
                    step: self.state.step,
                };
            }
        }
    }

    async fn advance(&mut self) -> Result<(), Fault> {
        if !self.snaps.read_only().valid {
            self.checkpoint().await?;
        }
        let spec = self.cfg.spec;
        while self.state.step < self.cfg.total_steps {
            let step = self.state.step;
            {
                let _g = self.rt.phase(Phase::GhostExchange, step).await;
                exchange_ghosts(&mut self.state.blocks, &self.map, &spec, &self.rt)
                    .await
                    .map_err(|_| Fault)?;
            }
            {
                let _g = self.rt.phase(Phase::Compute, step).await;
                let mut updates = 0;
                for b in &mut self.state.blocks {
                    b.step(self.cfg.dt).expect("validated time step");
                    updates += b.cells() * b.field_count();
                }
                self.rt.compute(updates);
            }
            self.state.step += 1;
            if self.state.step.is_multiple_of(self.cfg.checkpoint.interval_steps) {
                self.checkpoint().await?;
            }
        }
        Ok(())
    }

    async fn checkpoint(&mut self) -> Result<(), Fault> {
        match resilient_checkpoint(
            &self.rt,
            &mut self.registry,
            &mut self.snaps,
            &self.state,
            &self.map,
            &self.cfg.checkpoint,
        )
        .await
        {
            CheckpointOutcome::Committed => Ok(()),
            CheckpointOutcome::RolledBack => Err(Fault),
        }
    }

    async fn finalize(&mut self) -> bool {
        let _g = self.rt.phase(Phase::Finalize, self.state.step).await;
        matches!(self.rt.agree(1).await, Ok(a) if a.all_alive)
    }

    async fn recover(&mut self) -> Result<(), ()> {
        loop {
            match self.recover_once().await {
                Ok(()) => return Ok(()),
                Err(RecoverFailure::Retry) => continue,
                Err(RecoverFailure::Lost) => {
                    self.rt.log_event(EventKind::DataLoss, self.state.step, "");
                    return Err(());
                }
            }
        }
    }

    fn commit_vote(&self) -> u64 {
        let half = self.snaps.read_only();
        match (half.valid, half.step) {
            (true, Some(step)) => step,
            (false, Some(_)) => INVALID_COMMIT,
            _ => NO_COMMIT,
        }
    }

    async fn recover_once(&mut self) -> Result<(), RecoverFailure> {
        let step = self.state.step;
        {
            let _g = self.rt.phase(Phase::Revoke, step).await;
            self.rt.revoke();
            self.rt.log_event(EventKind::Revoke, step, "");
        }
        let agreement = {
            let _g = self.rt.phase(Phase::Shrink, step).await;
            let comm = self.rt.shrink().await;
            self.rt
                .log_event(EventKind::Shrink, step, format!("epoch={};size={}", comm.epoch, comm.size()));
            self.rt.agree(self.commit_vote()).await
        };
        let vote = match agreement {
            Ok(a) if a.all_alive => a,
            _ => return Err(RecoverFailure::Retry),
        };
        if vote.max == INVALID_COMMIT || vote.min != vote.max {
            return Err(RecoverFailure::Lost);
        }
        {
            let _g = self.rt.phase(Phase::Restore, step).await;
            if vote.min == NO_COMMIT {
                let map = contiguous_map(self.cfg.spec.num_blocks() as usize, self.rt.size());
                self.init_blocks(map);
                self.rt.log_event(EventKind::Restore, 0, "reinitialized");
            } else {
                let half = self.snaps.read_only();
                let context = half.context.as_ref().expect("committed halves carry context");
                let ctx = RecoveryContext {
                    old_nprocs: context.members.len(),
                    reassignment: self.rt.reassignment_from(&context.members),
                    strategy: self.cfg.checkpoint.strategy,
                };
                let summary = match restore_from_checkpoint(&self.rt, &self.registry, half, &ctx, &mut self.state) {
                    Ok(s) => s,
                    Err(RecoveryError::Unrecoverable(_)) => return Err(RecoverFailure::Lost),
                    Err(e) => panic!("committed snapshot failed to restore: {e}"),
                };
                self.map = remap_ownership(&context.map, &ctx, self.rt.size()).map_err(|_| RecoverFailure::Lost)?;
                debug_assert_eq!(
                    self.state.blocks.iter().map(|b| b.id).collect::<Vec<_>>(),
                    self.map.blocks_of(self.rt.rank())
                );
                let origins: Vec<String> = summary.restored_origins.iter().map(|o| o.to_string()).collect();
                self.rt
                    .log_event(EventKind::Restore, summary.step, format!("origins={}", origins.join("+")));
            }
        }
        let _g = self.rt.phase(Phase::Rebalance, self.state.step).await;
        let moved = migrate_blocks(&self.rt, &mut self.state, &mut self.map)
            .await
            .map_err(|_| RecoverFailure::Retry)?;
        self.rt
            .log_event(EventKind::Rebalance, self.state.step, format!("migrations={moved}"));
        Ok(())
    }
}

/// Apply [`rebalance_greedy`] by shipping every block whose owner changes.
async fn migrate_blocks(
    rt: &RankHandle,
    state: &mut RankState,
    map: &mut BlockMap,
) -> Result<usize, crate::runtime::CommError> {
    let (_, target) = rebalance_greedy(map);
    let me = rt.rank();
    let changed: Vec<BlockId> = (0..map.num_blocks() as u64)
        .map(BlockId)
        .filter(|&b| map.owner(b) != target.owner(b))
        .collect();
    for &b in &changed {
        if map.owner(b) == me {
            let pos = state.blocks.iter().position(|x| x.id == b).expect("owned block is held");
            let bytes = encode_blocks([&state.blocks[pos]]);
            rt.send(target.owner(b), Tag::migrate(b), bytes).await?;
        }
    }
    for &b in &changed {
        if target.owner(b) == me {
            let from = map.owner(b);
            let bytes = rt.recv(from, Tag::migrate(b)).await?;
            let blocks = decode_blocks(&bytes, from).expect("migrated block decodes");
            state.blocks.extend(blocks);
        }
    }
    state.blocks.retain(|blk| target.owner(blk.id) == me);
    state.blocks.sort_by_key(|blk| blk.id);
    *map = target;
    Ok(changed.len())
}

/// One checkpoint round. Double-buffered: fill the writable half, exchange
/// copies, then commit only if the handshake finds every rank alive and
/// successful. Single-buffered: overwrite in place, no handshake.
pub async fn resilient_checkpoint(
    rt: &RankHandle,
    registry: &mut Registry<RankState>,
    snaps: &mut SnapshotSet<CommitContext>,
    state: &RankState,
    map: &BlockMap,
    config: &CheckpointConfig,
) -> CheckpointOutcome {
    let step = state.step;
    let me = rt.rank();
    {
        let _g = rt.phase(Phase::SnapshotFill, step).await;
        let len = snaps
            .create_local_snapshot(registry, state, step, me as u32)
            .expect("entity callbacks do not fail");
        snaps.writable_mut().context = Some(CommitContext {
            map: map.clone(),
            members: rt.comm().members,
        });
        rt.memcopy_cost(len);
    }
    let ok = {
        let _g = rt.phase(Phase::SnapshotExchange, step).await;
        let own = snaps.writable().own.as_deref().expect("just filled");
        match exchange_snapshots(rt, own, (config.strategy)(me, rt.size())).await {
            Ok(copy) => {
                snaps.writable_mut().partners.extend(copy);
                true
            }
            Err(_) => false,
        }
    };
    if config.resilient_double_buffer {
        let _g = rt.phase(Phase::Handshake, step).await;
        match rt.handshake(ok).await {
            Ok(HandshakeVerdict::AllAlive) => {
                snaps.commit_swap(registry);
                rt.trace_marker("swap");
            }
            _ => return CheckpointOutcome::RolledBack,
        }
    } else if ok {
        snaps.commit_swap(registry);
        rt.trace_marker("swap");
    } else {
        return CheckpointOutcome::RolledBack;
    }
    let _g = rt.phase(Phase::Commit, step).await;
    rt.log_event(EventKind::Commit, step, "");
    rt.set_gauge(ResidentGauge {
        step,
        snapshot_bytes: snaps.read_only().own.as_ref().map_or(0, Vec::len) as u64,
        live_bytes: state.live_bytes() as u64,
        buffer_bytes: snaps.resident_bytes() as u64,
    });
    CheckpointOutcome::Committed
}

/// The per-rank program: run `cfg.total_steps` steps with periodic
/// checkpoints, recovering from every fault that leaves each snapshot with
/// at least one surviving holder.
pub async fn run_with_recovery(rt: RankHandle, cfg: RunConfig) -> RankResult {
    Worker::new(rt, cfg).run().await
}

/// A full checkpointed simulation.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: SimulationReport,
    pub ranks: Vec<Option<RankResult>>,
    pub trace: Option<Vec<TraceEntry>>,
}

/// Run [`run_with_recovery`] on every process and combine the results.
pub fn simulate_run(
    cfg: &RunConfig,
    schedule: &FaultSchedule,
    cost: CostModel,
    options: SimOptions,
) -> Result<RunArtifacts, SimError> {
    cfg.validate().map_err(|e| SimError::InvalidSchedule(e.to_string()))?;
    let program_cfg = cfg.clone();
    let out = run_simulation(cfg.spec.num_processes, schedule, cost, cfg.seed, options, move |rt| {
        run_with_recovery(rt, program_cfg.clone())
    })?;
    let survivors: Vec<usize> = out
        .outputs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.as_ref().is_some_and(|r| r.outcome == Outcome::Completed))
        .map(|(i, _)| i)
        .collect();
    let lost = survivors.is_empty()
        || out
            .outputs
            .iter()
            .flatten()
            .any(|r| r.outcome == Outcome::DataLoss);
    let final_step = out.outputs.iter().flatten().map(|r| r.step).max().unwrap_or(0);
    let (outcome, final_checksum) = if lost {
        (Outcome::DataLoss, None)
    } else {
        let blocks: Vec<&BlockData> = out.outputs.iter().flatten().flat_map(|r| &r.blocks).collect();
        assert_eq!(blocks.len() as u64, cfg.spec.num_blocks(), "completed run must hold every block");
        (Outcome::Completed, Some(state_checksum(blocks, final_step)))
    };
    Ok(RunArtifacts {
        report: SimulationReport {
            metrics: out.metrics,
            total_time: out.total_time,
            final_checksum,
            final_step,
            outcome,
            survivors,
        },
        ranks: out.outputs,
        trace: out.trace,
    })
}

/// Checksum of the same workload run serially on one process, without any
/// runtime.
pub fn reference_checksum(spec: &DomainSpec, total_steps: u64, dt: f64, seed: u64) -> Result<u64, WorkloadError> {
    spec.validate()?;
    let mut blocks = (0..spec.num_blocks())
        .map(|i| init_block(BlockId(i), spec, seed, 0))
        .collect::<Result<Vec<_>, _>>()?;
    for _ in 0..total_steps {
        fill_local_halos(&mut blocks, spec);
        for b in &mut blocks {
            b.step(dt)?;
        }
    }
    Ok(state_checksum(&blocks, total_steps))
}

#[cfg(test)]
mod tests;
