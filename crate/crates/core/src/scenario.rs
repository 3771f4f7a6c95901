//! Scenario files: a flat `key = value` format with `#` comments.
//!
//! ```text
//! global_cells = 16x16x8
//! block_cells = 4x4x4
//! num_processes = 8
//! total_steps = 100
//! checkpoint_interval = 10
//! fault = rank 3 phase compute step 37
//! fault = node 1 time 2.5ms
//! bandwidth = 4GiB/s
//! ```
//!
//! Durations need one of `ns`, `us`, `ms`, `s`, `min`, `h`. Sizes need `B`,
//! `KiB`, `MiB` or `GiB`; bandwidths are a size followed by `/s`.

use std::fmt;
use std::path::PathBuf;

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::DomainSpec;
use crate::metrics::Phase;
use crate::planner::{simulate_waste_stats, PlannerInputs, WasteStats};
use crate::recovery::{simulate_run, CheckpointConfig, RunArtifacts, RunConfig};
use crate::runtime::{CostModel, FaultEntry, FaultSchedule, FaultTrigger, SimError, SimOptions, Victim};
use crate::workload::DEFAULT_DT;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub global_cells: [usize; 3],
    pub block_cells: [usize; 3],
    pub fields_per_cell: usize,
    pub num_processes: usize,
    pub ranks_per_node: usize,
    pub total_steps: u64,
    pub checkpoint_interval: u64,
    pub resilient: bool,
    pub dt: f64,
    pub seed: u64,
    pub mtbf_ind: Option<f64>,
    pub faults: Vec<FaultEntry>,
    pub cost: CostModel,
    pub output: Option<PathBuf>,
    /// Inputs for the Monte-Carlo interval sweep.
    pub checkpoint_cost: Option<f64>,
    pub recovery_cost: f64,
    pub horizon: Option<f64>,
    pub trials: usize,
}

impl ScenarioConfig {
    /// A fault-free scenario with default costs.
    pub fn new(global_cells: [usize; 3], block_cells: [usize; 3], num_processes: usize, total_steps: u64, interval: u64) -> Self {
        Self {
            global_cells,
            block_cells,
            fields_per_cell: crate::grid::DEFAULT_FIELDS_PER_CELL,
            num_processes,
            ranks_per_node: 1,
            total_steps,
            checkpoint_interval: interval,
            resilient: true,
            dt: DEFAULT_DT,
            seed: 0,
            mtbf_ind: None,
            faults: Vec::new(),
            cost: CostModel::default(),
            output: None,
            checkpoint_cost: None,
            recovery_cost: 1.0,
            horizon: None,
            trials: 1000,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut b = Builder::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| ScenarioError::Parse { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            b.set(key.trim(), value.trim()).map_err(err)?;
        }
        let cfg = b.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn domain(&self) -> DomainSpec {
        DomainSpec::new(self.global_cells, self.block_cells, self.num_processes).with_fields(self.fields_per_cell)
    }

    pub fn run_config(&self) -> RunConfig {
        let mut checkpoint = CheckpointConfig::new(self.checkpoint_interval);
        checkpoint.resilient_double_buffer = self.resilient;
        RunConfig {
            spec: self.domain(),
            total_steps: self.total_steps,
            dt: self.dt,
            seed: self.seed,
            checkpoint,
        }
    }

    pub fn schedule(&self) -> FaultSchedule {
        FaultSchedule {
            entries: self.faults.clone(),
            mtbf_ind: self.mtbf_ind,
            ranks_per_node: self.ranks_per_node,
        }
    }

    /// Check every precondition the run would otherwise hit later.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |e: &dyn fmt::Display| ScenarioError::Invalid(e.to_string());
        self.run_config().validate().map_err(|e| invalid(&e))?;
        self.cost.validate().map_err(|e| invalid(&e))?;
        self.schedule().validate(self.num_processes).map_err(|e| invalid(&e))?;
        for (name, v) in [("checkpoint_cost", self.checkpoint_cost), ("horizon", self.horizon)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(ScenarioError::Invalid(format!("{name} must be positive")));
                }
            }
        }
        if !(self.recovery_cost >= 0.0 && self.recovery_cost.is_finite()) {
            return Err(ScenarioError::Invalid("recovery_cost must be non-negative".into()));
        }
        if self.trials == 0 {
            return Err(ScenarioError::Invalid("trials must be positive".into()));
        }
        Ok(())
    }

    /// Planner inputs for the waste sweep; needs `mtbf_ind` and `checkpoint_cost`.
    pub fn planner_inputs(&self) -> Result<PlannerInputs, ScenarioError> {
        let mu_ind = self.mtbf_ind.ok_or(ScenarioError::Missing("mtbf_ind"))?;
        let c = self.checkpoint_cost.ok_or(ScenarioError::Missing("checkpoint_cost"))?;
        let nodes = FaultSchedule::none().with_mtbf(mu_ind, self.ranks_per_node).num_nodes(self.num_processes);
        let mut p = PlannerInputs::new(mu_ind, nodes, c);
        p.recovery_cost = self.recovery_cost;
        p.resilient = self.resilient;
        Ok(p)
    }
}

/// Run the scenario's full simulation.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunArtifacts, SimError> {
    simulate_run(&cfg.run_config(), &cfg.schedule(), cfg.cost, SimOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub interval: f64,
    pub stats: WasteStats,
}

pub const SWEEP_HEADER: &str = "interval_s,mean_completion_s,mean_commits,mean_aborts";

/// Monte-Carlo completion time for each checkpoint interval (seconds).
pub fn sweep(cfg: &ScenarioConfig, intervals: &[f64]) -> Result<Vec<SweepRow>, ScenarioError> {
    if intervals.is_empty() {
        return Err(ScenarioError::Invalid("interval list is empty".into()));
    }
    if let Some(bad) = intervals.iter().find(|&&i| !(i > 0.0 && i.is_finite())) {
        return Err(ScenarioError::Invalid(format!("interval {bad} must be positive")));
    }
    let inputs = cfg.planner_inputs()?;
    let horizon = cfg.horizon.ok_or(ScenarioError::Missing("horizon"))?;
    Ok(intervals
        .par_iter()
        .map(|&interval| SweepRow {
            interval,
            stats: simulate_waste_stats(interval, &inputs, horizon, cfg.trials, cfg.seed),
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.interval, r.stats.mean_time, r.stats.mean_commits, r.stats.mean_aborts
        ));
    }
    out
}

#[derive(Default)]
struct Builder {
    global_cells: Option<[usize; 3]>,
    block_cells: Option<[usize; 3]>,
    num_processes: Option<usize>,
    total_steps: Option<u64>,
    checkpoint_interval: Option<u64>,
    seen: Vec<String>,
    rest: Vec<(String, String)>,
}

impl Builder {
    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        if key != "fault" {
            if self.seen.iter().any(|k| k == key) {
                return Err(format!("duplicate key `{key}`"));
            }
            self.seen.push(key.to_string());
        }
        match key {
            "global_cells" => self.global_cells = Some(parse_dims(value)?),
            "block_cells" => self.block_cells = Some(parse_dims(value)?),
            "num_processes" => self.num_processes = Some(parse_int(value)?),
            "total_steps" => self.total_steps = Some(parse_int(value)?),
            "checkpoint_interval" => self.checkpoint_interval = Some(parse_int(value)?),
            "fields_per_cell" | "ranks_per_node" | "resilient" | "dt" | "seed" | "mtbf_ind" | "fault"
            | "compute_cost_per_cell" | "message_latency" | "bandwidth" | "output" | "checkpoint_cost"
            | "recovery_cost" | "horizon" | "trials" => self.rest.push((key.to_string(), value.to_string())),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn finish(self) -> Result<ScenarioConfig, ScenarioError> {
        let mut cfg = ScenarioConfig::new(
            self.global_cells.ok_or(ScenarioError::Missing("global_cells"))?,
            self.block_cells.ok_or(ScenarioError::Missing("block_cells"))?,
            self.num_processes.ok_or(ScenarioError::Missing("num_processes"))?,
            self.total_steps.ok_or(ScenarioError::Missing("total_steps"))?,
            self.checkpoint_interval.ok_or(ScenarioError::Missing("checkpoint_interval"))?,
        );
        for (key, value) in self.rest {
            let v = value.as_str();
            let r: Result<(), String> = (|| {
                match key.as_str() {
                    "fields_per_cell" => cfg.fields_per_cell = parse_int(v)?,
                    "ranks_per_node" => cfg.ranks_per_node = parse_int(v)?,
                    "resilient" => cfg.resilient = parse_bool(v)?,
                    "dt" => cfg.dt = parse_float(v)?,
                    "seed" => cfg.seed = parse_int(v)?,
                    "mtbf_ind" => cfg.mtbf_ind = Some(parse_duration(v)?),
                    "fault" => cfg.faults.push(parse_fault(v)?),
                    "compute_cost_per_cell" => cfg.cost.compute_cost_per_cell = parse_duration(v)?,
                    "message_latency" => cfg.cost.message_latency = parse_duration(v)?,
                    "bandwidth" => cfg.cost.bandwidth = parse_bandwidth(v)?,
                    "output" => cfg.output = Some(PathBuf::from(v)),
                    "checkpoint_cost" => cfg.checkpoint_cost = Some(parse_duration(v)?),
                    "recovery_cost" => cfg.recovery_cost = parse_duration(v)?,
                    "horizon" => cfg.horizon = Some(parse_duration(v)?),
                    "trials" => cfg.trials = parse_int(v)?,
                    _ => unreachable!("keys are checked in set"),
                }
                Ok(())
            })();
            r.map_err(|m| ScenarioError::Invalid(format!("`{key}`: {m}")))?;
        }
        Ok(cfg)
    }
}

fn parse_int<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn parse_float(v: &str) -> Result<f64, String> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("expected a number, got `{v}`")),
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected `true` or `false`, got `{v}`")),
    }
}

fn parse_dims(v: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected `XxYxZ`, got `{v}`"));
    }
    Ok([parse_int(parts[0])?, parse_int(parts[1])?, parse_int(parts[2])?])
}

fn split_unit(v: &str, units: &[(&str, f64)]) -> Result<f64, String> {
    let mut best: Option<(&str, f64)> = None;
    for &(suffix, scale) in units {
        if v.ends_with(suffix) && best.is_none_or(|(b, _)| suffix.len() > b.len()) {
            best = Some((suffix, scale));
        }
    }
    let (suffix, scale) = best.ok_or_else(|| {
        let names: Vec<&str> = units.iter().map(|u| u.0).collect();
        format!("`{v}` needs a unit suffix ({})", names.join(", "))
    })?;
    let number = &v[..v.len() - suffix.len()];
    if number.is_empty() || number.ends_with(char::is_whitespace) {
        return Err(format!("malformed quantity `{v}`"));
    }
    Ok(parse_float(number)? * scale)
}

const TIME_UNITS: [(&str, f64); 6] = [
    ("ns", 1e-9),
    ("us", 1e-6),
    ("ms", 1e-3),
    ("s", 1.0),
    ("min", 60.0),
    ("h", 3600.0),
];

const SIZE_UNITS: [(&str, f64); 4] = [
    ("B", 1.0),
    ("KiB", 1024.0),
    ("MiB", 1024.0 * 1024.0),
    ("GiB", 1024.0 * 1024.0 * 1024.0),
];

/// Parse a duration such as `2.5ms` or `8h` into seconds.
pub fn parse_duration(v: &str) -> Result<f64, String> {
    split_unit(v, &TIME_UNITS)
}

/// Parse a size such as `64KiB` into bytes.
pub fn parse_size(v: &str) -> Result<f64, String> {
    split_unit(v, &SIZE_UNITS)
}

pub fn parse_bandwidth(v: &str) -> Result<f64, String> {
    let size = v.strip_suffix("/s").ok_or_else(|| format!("bandwidth `{v}` must end in `/s`"))?;
    parse_size(size)
}

fn parse_fault(v: &str) -> Result<FaultEntry, String> {
    let words: Vec<&str> = v.split_whitespace().collect();
    if !words.len().is_multiple_of(2) {
        return Err(format!("fault `{v}` must be `word value` pairs"));
    }
    let mut victim = None;
    let mut time = None;
    let mut phase = None;
    let mut step = None;
    let mut ops = None;
    for pair in words.chunks(2) {
        let (k, val) = (pair[0], pair[1]);
        let dup = || format!("fault `{v}` repeats `{k}`");
        match k {
            "rank" | "node" => {
                if victim.is_some() {
                    return Err(dup());
                }
                let id = parse_int(val)?;
                victim = Some(if k == "rank" { Victim::Rank(id) } else { Victim::Node(id) });
            }
            "time" if time.is_none() => time = Some(parse_duration(val)?),
            "phase" if phase.is_none() => {
                phase = Some(
                    Phase::from_name(val)
                        .filter(|p| FAULT_PHASES.contains(p))
                        .ok_or_else(|| format!("`{val}` is not a fault phase"))?,
                )
            }
            "step" if step.is_none() => step = Some(parse_int(val)?),
            "ops" if ops.is_none() => ops = Some(parse_int(val)?),
            "time" | "phase" | "step" | "ops" => return Err(dup()),
            _ => return Err(format!("unknown fault field `{k}`")),
        }
    }
    let victim = victim.ok_or_else(|| format!("fault `{v}` names no rank or node"))?;
    let trigger = match (time, phase) {
        (Some(t), None) if step.is_none() && ops.is_none() => FaultTrigger::AtTime(t),
        (None, Some(phase)) if ops.unwrap_or(0) > 0 && LOCAL_PHASES.contains(&phase) => {
            return Err(format!("phase {phase} sends no messages, so `ops` must be 0"));
        }
        (None, Some(phase)) => FaultTrigger::AtPhase {
            step,
            phase,
            after_ops: ops.unwrap_or(0),
        },
        _ => return Err(format!("fault `{v}` needs either `time` or `phase` (with optional `step`, `ops`)")),
    };
    Ok(FaultEntry { victim, trigger })
}

/// Phases with a single fault boundary, at entry.
const LOCAL_PHASES: [Phase; 6] = [
    Phase::Init,
    Phase::Compute,
    Phase::SnapshotFill,
    Phase::Commit,
    Phase::Revoke,
    Phase::Restore,
];

/// Phases a scripted fault may target.
pub const FAULT_PHASES: [Phase; 12] = [
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
    Phase::Init,
];

fn fmt_dims(d: [usize; 3]) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

impl fmt::Display for ScenarioConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "global_cells = {}", fmt_dims(self.global_cells))?;
        writeln!(f, "block_cells = {}", fmt_dims(self.block_cells))?;
        writeln!(f, "fields_per_cell = {}", self.fields_per_cell)?;
        writeln!(f, "num_processes = {}", self.num_processes)?;
        writeln!(f, "ranks_per_node = {}", self.ranks_per_node)?;
        writeln!(f, "total_steps = {}", self.total_steps)?;
        writeln!(f, "checkpoint_interval = {}", self.checkpoint_interval)?;
        writeln!(f, "resilient = {}", self.resilient)?;
        writeln!(f, "dt = {}", self.dt)?;
        writeln!(f, "seed = {}", self.seed)?;
        if let Some(mu) = self.mtbf_ind {
            writeln!(f, "mtbf_ind = {mu}s")?;
        }
        for e in &self.faults {
            let victim = match e.victim {
                Victim::Rank(r) => format!("rank {r}"),
                Victim::Node(n) => format!("node {n}"),
            };
            match e.trigger {
                FaultTrigger::AtTime(t) => writeln!(f, "fault = {victim} time {t}s")?,
                FaultTrigger::AtPhase { step, phase, after_ops } => {
                    write!(f, "fault = {victim} phase {phase}")?;
                    if let Some(s) = step {
                        write!(f, " step {s}")?;
                    }
                    writeln!(f, " ops {after_ops}")?;
                }
            }
        }
        writeln!(f, "compute_cost_per_cell = {}s", self.cost.compute_cost_per_cell)?;
        writeln!(f, "message_latency = {}s", self.cost.message_latency)?;
        writeln!(f, "bandwidth = {}B/s", self.cost.bandwidth)?;
        if let Some(p) = &self.output {
            writeln!(f, "output = {}", p.display())?;
        }
        if let Some(c) = self.checkpoint_cost {
            writeln!(f, "checkpoint_cost = {c}s")?;
        }
        writeln!(f, "recovery_cost = {}s", self.recovery_cost)?;
        if let Some(h) = self.horizon {
            writeln!(f, "horizon = {h}s")?;
        }
        writeln!(f, "trials = {}", self.trials)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# reference scenario
global_cells = 16x16x8
block_cells = 4x4x4
num_processes = 8
total_steps = 100
checkpoint_interval = 10   # steps
fault = rank 3 phase compute step 37
fault = node 2 time 2.5ms
mtbf_ind = 8h
bandwidth = 2GiB/s
message_latency = 3us
";

    #[test]
    fn parses_sample() {
        let c = ScenarioConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.global_cells, [16, 16, 8]);
        assert_eq!(c.mtbf_ind, Some(28800.0));
        assert_eq!(c.cost.bandwidth, 2.0 * 1024.0 * 1024.0 * 1024.0);
        assert_eq!(c.cost.message_latency, 3e-6);
        assert_eq!(c.faults.len(), 2);
        assert_eq!(c.faults[0].trigger, FaultTrigger::at_phase(37, Phase::Compute));
        assert_eq!(c.faults[1].victim, Victim::Node(2));
        assert_eq!(c.faults[1].trigger, FaultTrigger::AtTime(0.0025));
    }

    #[test]
    fn round_trips_through_display() {
        let mut c = ScenarioConfig::parse(SAMPLE).unwrap();
        c.output = Some("out/report.csv".into());
        c.checkpoint_cost = Some(7.0);
        c.horizon = Some(36000.0);
        c.faults.push(FaultEntry {
            victim: Victim::Rank(1),
            trigger: FaultTrigger::AtPhase {
                step: None,
                phase: Phase::Handshake,
                after_ops: 1,
            },
        });
        let text = c.to_string();
        assert_eq!(ScenarioConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn units_are_strict() {
        assert!(parse_duration("5").is_err());
        assert!(parse_duration("5sec").is_err());
        assert!(parse_duration("s").is_err());
        assert_eq!(parse_duration("2min").unwrap(), 120.0);
        assert_eq!(parse_duration("1.5h").unwrap(), 5400.0);
        assert_eq!(parse_size("64KiB").unwrap(), 65536.0);
        assert!(parse_size("64kb").is_err());
        assert!(parse_bandwidth("1GiB").is_err());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(ScenarioConfig::parse("global_cells = 4x4x4"), Err(ScenarioError::Missing(_))));
        let dup = format!("{SAMPLE}seed = 1\nseed = 2\n");
        assert!(matches!(ScenarioConfig::parse(&dup), Err(ScenarioError::Parse { line: 13, .. })));
        let unknown = format!("{SAMPLE}colour = red\n");
        assert!(ScenarioConfig::parse(&unknown).is_err());
        let bad_domain = SAMPLE.replace("block_cells = 4x4x4", "block_cells = 5x4x4");
        assert!(matches!(ScenarioConfig::parse(&bad_domain), Err(ScenarioError::Invalid(_))));
        let bad_fault = format!("{SAMPLE}fault = rank 99 phase compute\n");
        assert!(matches!(ScenarioConfig::parse(&bad_fault), Err(ScenarioError::Invalid(_))));
        let unreachable = format!("{SAMPLE}fault = rank 1 phase snapshot-fill ops 1\n");
        assert!(ScenarioConfig::parse(&unreachable).is_err());
        let ok = format!("{SAMPLE}fault = rank 1 phase snapshot-exchange ops 1\n");
        assert!(ScenarioConfig::parse(&ok).is_ok());
        let both = format!("{SAMPLE}fault = rank 1 time 1s phase compute\n");
        assert!(ScenarioConfig::parse(&both).is_err());
    }

    #[test]
    fn sweep_needs_intervals_and_planner_keys() {
        let mut c = ScenarioConfig::parse(SAMPLE).unwrap();
        assert!(sweep(&c, &[]).is_err());
        assert!(matches!(sweep(&c, &[10.0]), Err(ScenarioError::Missing("checkpoint_cost"))));
        c.checkpoint_cost = Some(7.0);
        c.horizon = Some(3600.0);
        c.trials = 20;
        let rows = sweep(&c, &[100.0, 200.0]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(sweep_csv(&rows).starts_with(SWEEP_HEADER));
    }
}
