//! Per-rank, per-phase accounting and the run report.

use std::fmt::{self, Write as _};

/// Program phase that traffic and simulated time are attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Idle,
    Init,
    Compute,
    GhostExchange,
    SnapshotFill,
    SnapshotExchange,
    Handshake,
    Commit,
    Revoke,
    Shrink,
    Restore,
    Rebalance,
    Finalize,
}

impl Phase {
    pub const ALL: [Phase; 13] = [
        Phase::Idle,
        Phase::Init,
        Phase::Compute,
        Phase::GhostExchange,
        Phase::SnapshotFill,
        Phase::SnapshotExchange,
        Phase::Handshake,
        Phase::Commit,
        Phase::Revoke,
        Phase::Shrink,
        Phase::Restore,
        Phase::Rebalance,
        Phase::Finalize,
    ];

    /// Phases that make up one checkpoint round.
    pub const CHECKPOINT: [Phase; 4] = [
        Phase::SnapshotFill,
        Phase::SnapshotExchange,
        Phase::Handshake,
        Phase::Commit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::Init => "init",
            Phase::Compute => "compute",
            Phase::GhostExchange => "ghost-exchange",
            Phase::SnapshotFill => "snapshot-fill",
            Phase::SnapshotExchange => "snapshot-exchange",
            Phase::Handshake => "handshake",
            Phase::Commit => "commit",
            Phase::Revoke => "revoke",
            Phase::Shrink => "shrink",
            Phase::Restore => "restore",
            Phase::Rebalance => "rebalance",
            Phase::Finalize => "finalize",
        }
    }

    pub fn from_name(s: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.name() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseCounter {
    pub bytes: u64,
    pub messages: u64,
    pub seconds: f64,
}

/// Declaration order is the tie-break order for events at equal time and rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Fault,
    Abort,
    Revoke,
    Shrink,
    Restore,
    Rebalance,
    Commit,
    DataLoss,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Fault => "fault",
            EventKind::Abort => "abort",
            EventKind::Revoke => "revoke",
            EventKind::Shrink => "shrink",
            EventKind::Restore => "restore",
            EventKind::Rebalance => "rebalance",
            EventKind::Commit => "commit",
            EventKind::DataLoss => "data-loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    /// Process identity, i.e. the rank in the initial communicator.
    pub rank: usize,
    pub kind: EventKind,
    pub phase: Phase,
    pub step: u64,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidentGauge {
    pub step: u64,
    /// Encoded size of this rank's own most recent snapshot.
    pub snapshot_bytes: u64,
    /// Payload bytes of the live state.
    pub live_bytes: u64,
    /// Bytes held by every snapshot buffer (own and partner copies).
    pub buffer_bytes: u64,
}

impl ResidentGauge {
    /// Live state plus all snapshot buffers.
    pub fn resident_bytes(&self) -> u64 {
        self.live_bytes + self.buffer_bytes
    }
}

/// Counters threaded through one simulation.
#[derive(Debug, Clone)]
pub struct Metrics {
    counters: Vec<[PhaseCounter; Phase::ALL.len()]>,
    current: Vec<Option<Phase>>,
    events: Vec<Event>,
    gauges: Vec<Option<ResidentGauge>>,
}

impl Metrics {
    pub fn new(num_ranks: usize) -> Self {
        Self {
            counters: vec![[PhaseCounter::default(); Phase::ALL.len()]; num_ranks],
            current: vec![None; num_ranks],
            events: Vec::new(),
            gauges: vec![None; num_ranks],
        }
    }

    /// Open a phase scope for `rank`. Scopes never nest.
    pub fn enter_phase(&mut self, rank: usize, phase: Phase) {
        assert!(
            self.current[rank].is_none(),
            "rank {rank}: phase {phase} entered while {} is still open",
            self.current[rank].unwrap()
        );
        self.current[rank] = Some(phase);
    }

    pub fn exit_phase(&mut self, rank: usize, phase: Phase) {
        assert_eq!(self.current[rank], Some(phase), "rank {rank}: mismatched phase exit");
        self.current[rank] = None;
    }

    pub fn current_phase(&self, rank: usize) -> Phase {
        self.current[rank].unwrap_or(Phase::Idle)
    }

    fn slot(&mut self, rank: usize) -> &mut PhaseCounter {
        let p = self.current_phase(rank);
        &mut self.counters[rank][p.index()]
    }

    pub fn record_send(&mut self, rank: usize, bytes: usize) {
        let c = self.slot(rank);
        c.bytes += bytes as u64;
        c.messages += 1;
    }

    pub fn record_time(&mut self, rank: usize, seconds: f64) {
        self.slot(rank).seconds += seconds;
    }

    pub fn log(&mut self, event: Event) {
        self.events.push(event);
    }

    pub fn set_gauge(&mut self, rank: usize, gauge: ResidentGauge) {
        self.gauges[rank] = Some(gauge);
    }

    pub fn counter(&self, rank: usize, phase: Phase) -> PhaseCounter {
        self.counters[rank][phase.index()]
    }

    pub fn num_ranks(&self) -> usize {
        self.counters.len()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn gauge(&self, rank: usize) -> Option<ResidentGauge> {
        self.gauges[rank]
    }

    /// Events in reporting order: time, then rank, then kind.
    pub fn sorted_events(&self) -> Vec<Event> {
        let mut ev = self.events.clone();
        ev.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then(a.rank.cmp(&b.rank))
                .then(a.kind.cmp(&b.kind))
        });
        ev
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    DataLoss,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::DataLoss => "data-loss",
        }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub metrics: Metrics,
    pub total_time: f64,
    pub final_checksum: Option<u64>,
    pub final_step: u64,
    pub outcome: Outcome,
    pub survivors: Vec<usize>,
}

pub const CSV_HEADER: &str = "kind,rank,phase,step,sim_time_s,bytes,messages,detail";

impl SimulationReport {
    pub fn counter(&self, rank: usize, phase: Phase) -> PhaseCounter {
        self.metrics.counter(rank, phase)
    }

    pub fn phase_total(&self, phase: Phase) -> PhaseCounter {
        (0..self.metrics.num_ranks()).fold(PhaseCounter::default(), |mut acc, r| {
            let c = self.metrics.counter(r, phase);
            acc.bytes += c.bytes;
            acc.messages += c.messages;
            acc.seconds += c.seconds;
            acc
        })
    }

    /// Bytes `rank` sent across all checkpoint-round phases.
    pub fn checkpoint_bytes(&self, rank: usize) -> u64 {
        Phase::CHECKPOINT.iter().map(|&p| self.counter(rank, p).bytes).sum()
    }

    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.metrics.events().iter().filter(move |e| e.kind == kind)
    }

    pub fn faults(&self) -> usize {
        self.events_of(EventKind::Fault).count()
    }

    /// Render the report. Row order is fixed: counters by (rank, phase),
    /// gauges by rank, events by (time, rank, kind), then summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for rank in 0..self.metrics.num_ranks() {
            for phase in Phase::ALL {
                let c = self.metrics.counter(rank, phase);
                let _ = writeln!(
                    out,
                    "counter,{rank},{},,{},{},{},",
                    phase.name(),
                    c.seconds,
                    c.bytes,
                    c.messages
                );
            }
        }
        for rank in 0..self.metrics.num_ranks() {
            if let Some(g) = self.metrics.gauge(rank) {
                let _ = writeln!(
                    out,
                    "gauge,{rank},,{},,{},0,resident_bytes;snapshot_bytes={};live_bytes={}",
                    g.step,
                    g.resident_bytes(),
                    g.snapshot_bytes,
                    g.live_bytes
                );
            }
        }
        for e in self.metrics.sorted_events() {
            let _ = writeln!(
                out,
                "event,{},{},{},{},0,0,{}{}{}",
                e.rank,
                e.phase.name(),
                e.step,
                e.time,
                e.kind.name(),
                if e.detail.is_empty() { "" } else { ";" },
                e.detail
            );
        }
        let checksum = self
            .final_checksum
            .map_or_else(|| "none".to_string(), |c| format!("{c:#018x}"));
        let _ = writeln!(out, "summary,,,{},{},0,0,outcome={}", self.final_step, self.total_time, self.outcome.name());
        let _ = writeln!(out, "summary,,,{},{},0,0,final_checksum={checksum}", self.final_step, self.total_time);
        let _ = writeln!(out, "summary,,,{},{},0,0,faults={}", self.final_step, self.total_time, self.faults());
        out
    }
}
