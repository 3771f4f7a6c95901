//! Deterministic simulated message-passing cluster with ULFM-style failure
//! semantics.
//!
//! Each process program is a future polled by a single-threaded cooperative
//! scheduler in process order. Runtime calls are the only suspension points.
//! Every process keeps its own simulated clock; a message carries its arrival
//! time and a receiver's clock jumps forward to it.
//!
//! Failure semantics:
//! - talking to a dead process yields [`CommError::ProcFailed`];
//! - any call on a revoked communicator yields [`CommError::Revoked`] without
//!   transferring anything, including calls already blocked on it;
//! - [`RankHandle::shrink`] builds a dense, order-preserving communicator of
//!   the survivors;
//! - [`RankHandle::agree`] is a uniform collective: every participant that
//!   gets a verdict gets the same one.
//!
//! A killed process simply stops at its next boundary and its future is
//! dropped.

pub mod faults;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::future::{poll_fn, Future};
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use thiserror::Error;

pub use faults::{sample_node_failures, FaultEntry, FaultSchedule, FaultTrigger, Victim};

use crate::grid::{BlockId, Face, Rank};
use crate::metrics::{Event, EventKind, Metrics, Phase, ResidentGauge};
use faults::ResolvedFault;

/// Process identity: its rank in the initial communicator. Never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcId(pub u32);

impl ProcId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ProcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CommError {
    #[error("process at rank {rank} has failed")]
    ProcFailed { rank: Rank },
    #[error("communicator has been revoked")]
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("deadlock: live processes {blocked:?} are all blocked")]
    Deadlock { blocked: Vec<usize> },
    #[error("invalid fault schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
}

/// Message tag. The low byte carries the message class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u64);

impl Tag {
    /// Halo data destined for `block`'s halo on `face`.
    pub fn ghost(block: BlockId, face: Face) -> Tag {
        Tag(block.0 << 8 | (face.index() as u64) << 4 | 1)
    }

    pub fn snapshot() -> Tag {
        Tag(2)
    }

    pub fn migrate(block: BlockId) -> Tag {
        Tag(block.0 << 8 | 3)
    }

    pub fn user(value: u32) -> Tag {
        Tag((value as u64) << 8 | 0xF)
    }
}

/// Simulated timing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Seconds per cell per field for one stencil update.
    pub compute_cost_per_cell: f64,
    pub message_latency: f64,
    /// Bytes per simulated second, for messages and local copies alike.
    pub bandwidth: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            compute_cost_per_cell: 1e-9,
            message_latency: 2e-6,
            bandwidth: 5e9,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("compute_cost_per_cell", self.compute_cost_per_cell),
            ("message_latency", self.message_latency),
            ("bandwidth", self.bandwidth),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::InvalidCost(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn collective_time(&self, participants: usize) -> f64 {
        let depth = (participants.max(2) as f64).log2().ceil();
        2.0 * depth * self.message_latency
    }
}

/// Outcome of an agreement collective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Agreement {
    /// No member of the communicator had died when the collective completed.
    pub all_alive: bool,
    pub min: u64,
    pub max: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakeVerdict {
    AllAlive,
    FailuresDetected,
}

/// Snapshot of a communicator's state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Communicator {
    pub epoch: usize,
    pub members: Vec<ProcId>,
    pub revoked: bool,
    /// For the most recent shrink: previous rank to new rank, `None` if dead.
    pub reassignment: Vec<Option<Rank>>,
}

impl Communicator {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn rank_of(&self, pid: ProcId) -> Option<Rank> {
        self.members.iter().position(|&p| p == pid)
    }
}

/// Chain two reassignment maps: `first` then `second`.
pub fn compose_reassignment(first: &[Option<Rank>], second: &[Option<Rank>]) -> Vec<Option<Rank>> {
    first.iter().map(|r| r.and_then(|r| second.get(r).copied().flatten())).collect()
}

/// Entry in the optional boundary trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEntry {
    Boundary { pid: ProcId, phase: Phase, step: u64, ops: u32 },
    Marker { pid: ProcId, label: &'static str },
}

struct Proc {
    alive: bool,
    finished: bool,
    clock: f64,
    epoch: usize,
    rank: Rank,
    coll_seq: u64,
    step: u64,
    ops: u32,
}

#[derive(Default)]
struct Collective {
    arrivals: BTreeMap<ProcId, (u64, f64)>,
    result: Option<(Agreement, f64)>,
}

#[derive(Default)]
struct ShrinkState {
    arrived: BTreeSet<ProcId>,
    max_clock: f64,
    result: Option<usize>,
}

struct Comm {
    members: Vec<ProcId>,
    revoked: bool,
    reassignment: Vec<Option<Rank>>,
    collectives: BTreeMap<u64, Collective>,
    shrink: ShrinkState,
}

struct Message {
    bytes: Vec<u8>,
    arrival: f64,
}

type QueueKey = (usize, ProcId, ProcId, Tag);

struct World {
    procs: Vec<Proc>,
    comms: Vec<Comm>,
    queues: BTreeMap<QueueKey, VecDeque<Message>>,
    faults: Vec<ResolvedFault>,
    cost: CostModel,
    metrics: Metrics,
    version: u64,
    trace: Option<Vec<TraceEntry>>,
}

impl World {
    fn advance(&mut self, pid: ProcId, dt: f64) {
        if dt > 0.0 {
            self.procs[pid.index()].clock += dt;
            self.metrics.record_time(pid.index(), dt);
            self.version += 1;
        }
    }

    fn advance_to(&mut self, pid: ProcId, t: f64) {
        let now = self.procs[pid.index()].clock;
        if t > now {
            self.advance(pid, t - now);
        }
    }

    fn comm_of(&self, pid: ProcId) -> &Comm {
        &self.comms[self.procs[pid.index()].epoch]
    }

    fn alive(&self, pid: ProcId) -> bool {
        self.procs[pid.index()].alive
    }

    /// Evaluate fault triggers for `pid` at a boundary. Returns true if it died.
    fn check_faults(&mut self, pid: ProcId) -> bool {
        let p = &self.procs[pid.index()];
        let phase = self.metrics.current_phase(pid.index());
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry::Boundary {
                pid,
                phase,
                step: p.step,
                ops: p.ops,
            });
        }
        let (clock, step, ops) = (p.clock, p.step, p.ops);
        let hit = self.faults.iter().position(|f| {
            !f.fired
                && f.pids.contains(&pid)
                && match f.trigger {
                    FaultTrigger::AtTime(t) => clock >= t,
                    FaultTrigger::AtPhase {
                        step: s,
                        phase: ph,
                        after_ops,
                    } => ph == phase && s.is_none_or(|s| s == step) && ops >= after_ops,
                }
        });
        let Some(i) = hit else { return false };
        self.faults[i].fired = true;
        for victim in self.faults[i].pids.clone() {
            let vp = &mut self.procs[victim.index()];
            if !vp.alive || vp.finished {
                continue;
            }
            vp.alive = false;
            let (vstep, vphase) = (vp.step, self.metrics.current_phase(victim.index()));
            self.metrics.log(Event {
                time: clock,
                rank: victim.index(),
                kind: EventKind::Fault,
                phase: vphase,
                step: vstep,
                detail: String::new(),
            });
        }
        self.version += 1;
        !self.procs[pid.index()].alive
    }
}

/// A process's view of the runtime.
#[derive(Clone)]
pub struct RankHandle {
    world: Rc<RefCell<World>>,
    pid: ProcId,
}

/// Scoped phase attribution; the phase closes when the guard drops.
pub struct PhaseGuard {
    world: Rc<RefCell<World>>,
    pid: ProcId,
    phase: Phase,
}

impl Drop for PhaseGuard {
    fn drop(&mut self) {
        self.world.borrow_mut().metrics.exit_phase(self.pid.index(), self.phase);
    }
}

impl RankHandle {
    pub fn pid(&self) -> ProcId {
        self.pid
    }

    pub fn rank(&self) -> Rank {
        self.world.borrow().procs[self.pid.index()].rank
    }

    pub fn size(&self) -> usize {
        self.world.borrow().comm_of(self.pid).members.len()
    }

    pub fn now(&self) -> f64 {
        self.world.borrow().procs[self.pid.index()].clock
    }

    pub fn cost(&self) -> CostModel {
        self.world.borrow().cost
    }

    pub fn comm(&self) -> Communicator {
        let w = self.world.borrow();
        let epoch = w.procs[self.pid.index()].epoch;
        let c = &w.comms[epoch];
        Communicator {
            epoch,
            members: c.members.clone(),
            revoked: c.revoked,
            reassignment: c.reassignment.clone(),
        }
    }

    /// Map ranks of an earlier member list onto the current communicator.
    pub fn reassignment_from(&self, earlier: &[ProcId]) -> Vec<Option<Rank>> {
        let w = self.world.borrow();
        let current = &w.comm_of(self.pid).members;
        earlier.iter().map(|pid| current.iter().position(|p| p == pid)).collect()
    }

    /// Suspend forever if this process is dead; its future will be dropped.
    async fn boundary(&self) {
        let died = self.world.borrow_mut().check_faults(self.pid);
        if died || !self.world.borrow().alive(self.pid) {
            std::future::pending::<()>().await;
        }
    }

    fn count_op(&self) {
        self.world.borrow_mut().procs[self.pid.index()].ops += 1;
    }

    /// Enter `phase` for application step `step`. Phase entry is a fault
    /// injection point.
    pub async fn phase(&self, phase: Phase, step: u64) -> PhaseGuard {
        {
            let mut w = self.world.borrow_mut();
            w.metrics.enter_phase(self.pid.index(), phase);
            let p = &mut w.procs[self.pid.index()];
            p.step = step;
            p.ops = 0;
        }
        let guard = PhaseGuard {
            world: self.world.clone(),
            pid: self.pid,
            phase,
        };
        self.boundary().await;
        guard
    }

    /// Charge local compute time.
    pub fn compute(&self, cell_updates: usize) {
        let mut w = self.world.borrow_mut();
        let dt = cell_updates as f64 * w.cost.compute_cost_per_cell;
        w.advance(self.pid, dt);
    }

    /// Charge a local copy of `bytes`.
    pub fn memcopy_cost(&self, bytes: usize) {
        let mut w = self.world.borrow_mut();
        let dt = bytes as f64 / w.cost.bandwidth;
        w.advance(self.pid, dt);
    }

    pub fn log_event(&self, kind: EventKind, step: u64, detail: impl Into<String>) {
        let mut w = self.world.borrow_mut();
        let time = w.procs[self.pid.index()].clock;
        let phase = w.metrics.current_phase(self.pid.index());
        w.metrics.log(Event {
            time,
            rank: self.pid.index(),
            kind,
            phase,
            step,
            detail: detail.into(),
        });
    }

    pub fn set_gauge(&self, gauge: ResidentGauge) {
        self.world.borrow_mut().metrics.set_gauge(self.pid.index(), gauge);
    }

    pub fn trace_marker(&self, label: &'static str) {
        if let Some(t) = self.world.borrow_mut().trace.as_mut() {
            t.push(TraceEntry::Marker { pid: self.pid, label });
        }
    }

    /// Buffered send; completes locally.
    pub async fn send(&self, dest: Rank, tag: Tag, bytes: Vec<u8>) -> Result<(), CommError> {
        self.boundary().await;
        let mut w = self.world.borrow_mut();
        let epoch = w.procs[self.pid.index()].epoch;
        let comm = &w.comms[epoch];
        if comm.revoked {
            return Err(CommError::Revoked);
        }
        let dst = *comm
            .members
            .get(dest)
            .unwrap_or_else(|| panic!("send to rank {dest} outside communicator of size {}", comm.members.len()));
        if !w.alive(dst) {
            return Err(CommError::ProcFailed { rank: dest });
        }
        let dt = w.cost.message_latency + bytes.len() as f64 / w.cost.bandwidth;
        w.advance(self.pid, dt);
        w.metrics.record_send(self.pid.index(), bytes.len());
        let arrival = w.procs[self.pid.index()].clock;
        w.queues
            .entry((epoch, self.pid, dst, tag))
            .or_default()
            .push_back(Message { bytes, arrival });
        w.procs[self.pid.index()].ops += 1;
        w.version += 1;
        Ok(())
    }

    /// Blocking receive, FIFO per (source, destination, tag).
    pub async fn recv(&self, src: Rank, tag: Tag) -> Result<Vec<u8>, CommError> {
        self.boundary().await;
        let (epoch, src_pid) = {
            let w = self.world.borrow();
            let epoch = w.procs[self.pid.index()].epoch;
            let members = &w.comms[epoch].members;
            let src_pid = *members
                .get(src)
                .unwrap_or_else(|| panic!("recv from rank {src} outside communicator of size {}", members.len()));
            (epoch, src_pid)
        };
        let result = poll_fn(|_cx| {
            let mut w = self.world.borrow_mut();
            if w.comms[epoch].revoked {
                return Poll::Ready(Err(CommError::Revoked));
            }
            let key = (epoch, src_pid, self.pid, tag);
            if let Some(msg) = w.queues.get_mut(&key).and_then(VecDeque::pop_front) {
                w.advance_to(self.pid, msg.arrival);
                w.version += 1;
                return Poll::Ready(Ok(msg.bytes));
            }
            if !w.alive(src_pid) {
                return Poll::Ready(Err(CommError::ProcFailed { rank: src }));
            }
            Poll::Pending
        })
        .await;
        self.count_op();
        result
    }

    /// Mark the current communicator revoked on every rank. Idempotent.
    pub fn revoke(&self) {
        let mut w = self.world.borrow_mut();
        let epoch = w.procs[self.pid.index()].epoch;
        if !w.comms[epoch].revoked {
            w.comms[epoch].revoked = true;
            w.version += 1;
        }
    }

    /// Collective over the live members of the current communicator. Returns
    /// the new communicator, whose ranks are the survivors in old-rank order.
    pub async fn shrink(&self) -> Communicator {
        self.boundary().await;
        let epoch = {
            let mut w = self.world.borrow_mut();
            let epoch = w.procs[self.pid.index()].epoch;
            let clock = w.procs[self.pid.index()].clock;
            let s = &mut w.comms[epoch].shrink;
            s.arrived.insert(self.pid);
            s.max_clock = s.max_clock.max(clock);
            w.version += 1;
            epoch
        };
        let new_epoch = poll_fn(|_cx| {
            let mut w = self.world.borrow_mut();
            if let Some(e) = w.comms[epoch].shrink.result {
                return Poll::Ready(e);
            }
            let comm = &w.comms[epoch];
            let ready = comm
                .members
                .iter()
                .all(|&p| !w.alive(p) || comm.shrink.arrived.contains(&p));
            if !ready {
                return Poll::Pending;
            }
            let survivors: Vec<ProcId> = comm.members.iter().copied().filter(|&p| w.alive(p)).collect();
            let reassignment = comm
                .members
                .iter()
                .map(|p| survivors.iter().position(|s| s == p))
                .collect();
            let new_epoch = w.comms.len();
            w.comms.push(Comm {
                members: survivors,
                revoked: false,
                reassignment,
                collectives: BTreeMap::new(),
                shrink: ShrinkState::default(),
            });
            w.comms[epoch].shrink.result = Some(new_epoch);
            w.version += 1;
            Poll::Ready(new_epoch)
        })
        .await;
        let mut w = self.world.borrow_mut();
        let size = w.comms[new_epoch].members.len();
        let done = w.comms[epoch].shrink.max_clock + w.cost.collective_time(size);
        w.advance_to(self.pid, done);
        let rank = w.comms[new_epoch]
            .members
            .iter()
            .position(|&p| p == self.pid)
            .expect("a live caller survives its own shrink");
        let p = &mut w.procs[self.pid.index()];
        p.epoch = new_epoch;
        p.rank = rank;
        p.coll_seq = 0;
        p.ops += 1;
        let c = &w.comms[new_epoch];
        Communicator {
            epoch: new_epoch,
            members: c.members.clone(),
            revoked: c.revoked,
            reassignment: c.reassignment.clone(),
        }
    }

    /// Uniform agreement over `value` (min and max) and member liveness.
    /// Counts as two operations: contributing, then waiting for the verdict.
    pub async fn agree(&self, value: u64) -> Result<Agreement, CommError> {
        self.boundary().await;
        let (epoch, seq) = {
            let mut w = self.world.borrow_mut();
            let idx = self.pid.index();
            let epoch = w.procs[idx].epoch;
            if w.comms[epoch].revoked {
                return Err(CommError::Revoked);
            }
            let seq = w.procs[idx].coll_seq;
            w.procs[idx].coll_seq += 1;
            let clock = w.procs[idx].clock;
            w.comms[epoch]
                .collectives
                .entry(seq)
                .or_default()
                .arrivals
                .insert(self.pid, (value, clock));
            w.metrics.record_send(idx, 8);
            w.procs[idx].ops += 1;
            w.version += 1;
            (epoch, seq)
        };
        self.boundary().await;
        let result = poll_fn(|_cx| {
            let mut w = self.world.borrow_mut();
            let cost = w.cost;
            let comm = &w.comms[epoch];
            let coll = &comm.collectives[&seq];
            if let Some((agreement, done)) = coll.result {
                w.advance_to(self.pid, done);
                return Poll::Ready(Ok(agreement));
            }
            if comm.revoked {
                return Poll::Ready(Err(CommError::Revoked));
            }
            let ready = comm
                .members
                .iter()
                .all(|p| !w.alive(*p) || coll.arrivals.contains_key(p));
            if !ready {
                return Poll::Pending;
            }
            let all_alive = comm.members.iter().all(|&p| w.alive(p));
            let values = coll.arrivals.values().map(|&(v, _)| v);
            let agreement = Agreement {
                all_alive,
                min: values.clone().min().unwrap_or(0),
                max: values.max().unwrap_or(0),
            };
            let latest = coll.arrivals.values().map(|&(_, t)| t).fold(0.0, f64::max);
            let done = latest + cost.collective_time(comm.members.len());
            w.comms[epoch].collectives.get_mut(&seq).unwrap().result = Some((agreement, done));
            w.advance_to(self.pid, done);
            w.version += 1;
            Poll::Ready(Ok(agreement))
        })
        .await;
        self.count_op();
        result
    }

    /// Checkpoint handshake: `AllAlive` iff every member is alive and reported
    /// success.
    pub async fn handshake(&self, ok: bool) -> Result<HandshakeVerdict, CommError> {
        let a = self.agree(u64::from(ok)).await?;
        Ok(if a.all_alive && a.min == 1 {
            HandshakeVerdict::AllAlive
        } else {
            HandshakeVerdict::FailuresDetected
        })
    }
}

/// Raw result of a simulation.
pub struct SimOutput<T> {
    /// Program result per process; `None` for processes that died.
    pub outputs: Vec<Option<T>>,
    pub metrics: Metrics,
    /// Latest clock among all processes.
    pub total_time: f64,
    pub trace: Option<Vec<TraceEntry>>,
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    pub trace_boundaries: bool,
}

type ProcFuture<T> = Pin<Box<dyn Future<Output = T>>>;

/// Run `num_procs` copies of `program` to completion.
///
/// Stochastic failure times are drawn from `seed` before execution. The
/// result is a pure function of the inputs.
pub fn run_simulation<T, F, Fut>(
    num_procs: usize,
    schedule: &FaultSchedule,
    cost: CostModel,
    seed: u64,
    options: SimOptions,
    mut program: F,
) -> Result<SimOutput<T>, SimError>
where
    F: FnMut(RankHandle) -> Fut,
    Fut: Future<Output = T> + 'static,
{
    cost.validate()?;
    let faults = schedule.materialize(num_procs, seed)?;
    let members: Vec<ProcId> = (0..num_procs as u32).map(ProcId).collect();
    let world = Rc::new(RefCell::new(World {
        procs: (0..num_procs)
            .map(|r| Proc {
                alive: true,
                finished: false,
                clock: 0.0,
                epoch: 0,
                rank: r,
                coll_seq: 0,
                step: 0,
                ops: 0,
            })
            .collect(),
        comms: vec![Comm {
            reassignment: (0..num_procs).map(Some).collect(),
            members,
            revoked: false,
            collectives: BTreeMap::new(),
            shrink: ShrinkState::default(),
        }],
        queues: BTreeMap::new(),
        faults,
        cost,
        metrics: Metrics::new(num_procs),
        version: 0,
        trace: options.trace_boundaries.then(Vec::new),
    }));

    let mut tasks: Vec<Option<ProcFuture<T>>> = (0..num_procs)
        .map(|i| {
            let handle = RankHandle {
                world: world.clone(),
                pid: ProcId(i as u32),
            };
            Some(Box::pin(program(handle)) as ProcFuture<T>)
        })
        .collect();
    let mut outputs: Vec<Option<T>> = (0..num_procs).map(|_| None).collect();
    let mut cx = Context::from_waker(Waker::noop());

    loop {
        let mut progressed = false;
        let mut pending = Vec::new();
        for i in 0..num_procs {
            if tasks[i].is_none() {
                continue;
            }
            if !world.borrow().procs[i].alive {
                tasks[i] = None;
                progressed = true;
                continue;
            }
            let before = world.borrow().version;
            let poll = tasks[i].as_mut().unwrap().as_mut().poll(&mut cx);
            match poll {
                Poll::Ready(out) => {
                    outputs[i] = Some(out);
                    tasks[i] = None;
                    world.borrow_mut().procs[i].finished = true;
                    progressed = true;
                }
                Poll::Pending => {
                    if !world.borrow().procs[i].alive {
                        tasks[i] = None;
                        progressed = true;
                    } else {
                        pending.push(i);
                    }
                }
            }
            if world.borrow().version != before {
                progressed = true;
            }
        }
        if tasks.iter().all(Option::is_none) {
            break;
        }
        if !progressed {
            return Err(SimError::Deadlock { blocked: pending });
        }
    }
    drop(tasks);

    let world = Rc::try_unwrap(world)
        .ok()
        .expect("all process handles are dropped with their futures")
        .into_inner();
    let total_time = world.procs.iter().map(|p| p.clock).fold(0.0, f64::max);
    Ok(SimOutput {
        outputs,
        metrics: world.metrics,
        total_time,
        trace: world.trace,
    })
}
