//! Fault schedules: scripted kills plus optional exponential node failures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::{ProcId, SimError};
use crate::metrics::Phase;

/// When a victim dies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaultTrigger {
    /// At the first boundary where the victim's simulated clock is at least this.
    AtTime(f64),
    /// At the first boundary inside `phase` (optionally only at `step`) once
    /// the victim has completed `after_ops` runtime operations in that phase.
    /// `after_ops = 0` is the phase entry.
    AtPhase {
        step: Option<u64>,
        phase: Phase,
        after_ops: u32,
    },
}

impl FaultTrigger {
    pub fn at_phase(step: u64, phase: Phase) -> Self {
        FaultTrigger::AtPhase {
            step: Some(step),
            phase,
            after_ops: 0,
        }
    }

    fn sort_key(&self) -> (u8, f64, u64, Phase, u32) {
        match *self {
            FaultTrigger::AtTime(t) => (0, t, 0, Phase::Idle, 0),
            FaultTrigger::AtPhase { step, phase, after_ops } => {
                (1, 0.0, step.map_or(u64::MAX, |s| s), phase, after_ops)
            }
        }
    }
}

/// Who dies. Ranks use the numbering of the initial communicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Victim {
    Rank(usize),
    /// Every rank on the node; consecutive ranks share a node.
    Node(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultEntry {
    pub victim: Victim,
    pub trigger: FaultTrigger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultSchedule {
    pub entries: Vec<FaultEntry>,
    /// Per-node MTBF in simulated seconds; failure times are drawn before the
    /// run starts.
    pub mtbf_ind: Option<f64>,
    pub ranks_per_node: usize,
}

impl Default for FaultSchedule {
    fn default() -> Self {
        Self::none()
    }
}

/// A fault after victim expansion.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ResolvedFault {
    pub pids: Vec<ProcId>,
    pub trigger: FaultTrigger,
    pub fired: bool,
}

impl FaultSchedule {
    pub fn none() -> Self {
        Self {
            entries: Vec::new(),
            mtbf_ind: None,
            ranks_per_node: 1,
        }
    }

    pub fn kill(mut self, rank: usize, trigger: FaultTrigger) -> Self {
        self.entries.push(FaultEntry {
            victim: Victim::Rank(rank),
            trigger,
        });
        self
    }

    pub fn kill_node(mut self, node: usize, trigger: FaultTrigger) -> Self {
        self.entries.push(FaultEntry {
            victim: Victim::Node(node),
            trigger,
        });
        self
    }

    pub fn with_mtbf(mut self, mtbf_ind: f64, ranks_per_node: usize) -> Self {
        self.mtbf_ind = Some(mtbf_ind);
        self.ranks_per_node = ranks_per_node;
        self
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.ranks_per_node.max(1)
    }

    pub fn num_nodes(&self, num_procs: usize) -> usize {
        num_procs.div_ceil(self.ranks_per_node.max(1))
    }

    fn ranks_of(&self, victim: Victim, num_procs: usize) -> Vec<usize> {
        match victim {
            Victim::Rank(r) => vec![r],
            Victim::Node(n) => {
                let per = self.ranks_per_node.max(1);
                (n * per..((n + 1) * per).min(num_procs)).collect()
            }
        }
    }

    pub fn validate(&self, num_procs: usize) -> Result<(), SimError> {
        if self.ranks_per_node == 0 {
            return Err(SimError::InvalidSchedule("ranks_per_node must be positive".into()));
        }
        if let Some(mu) = self.mtbf_ind {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(SimError::InvalidSchedule(format!("mtbf_ind must be positive, got {mu}")));
            }
        }
        let mut seen = vec![false; num_procs];
        for e in &self.entries {
            let ranks = self.ranks_of(e.victim, num_procs);
            if ranks.is_empty() {
                return Err(SimError::InvalidSchedule(format!("victim {:?} has no ranks", e.victim)));
            }
            for r in ranks {
                if r >= num_procs {
                    return Err(SimError::InvalidSchedule(format!("victim rank {r} out of range")));
                }
                if std::mem::replace(&mut seen[r], true) {
                    return Err(SimError::InvalidSchedule(format!("rank {r} is scheduled to die twice")));
                }
            }
            if let FaultTrigger::AtTime(t) = e.trigger {
                if !(t >= 0.0 && t.is_finite()) {
                    return Err(SimError::InvalidSchedule(format!("fault time {t} is invalid")));
                }
            }
        }
        Ok(())
    }

    /// Expand victims, draw stochastic node failures, and sort by trigger.
    pub(crate) fn materialize(&self, num_procs: usize, seed: u64) -> Result<Vec<ResolvedFault>, SimError> {
        self.validate(num_procs)?;
        let mut out: Vec<ResolvedFault> = self
            .entries
            .iter()
            .map(|e| ResolvedFault {
                pids: self.ranks_of(e.victim, num_procs).into_iter().map(|r| ProcId(r as u32)).collect(),
                trigger: e.trigger,
                fired: false,
            })
            .collect();
        if let Some(mu) = self.mtbf_ind {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (node, t) in sample_node_failures(self.num_nodes(num_procs), mu, &mut rng)
                .into_iter()
                .enumerate()
            {
                out.push(ResolvedFault {
                    pids: self
                        .ranks_of(Victim::Node(node), num_procs)
                        .into_iter()
                        .map(|r| ProcId(r as u32))
                        .collect(),
                    trigger: FaultTrigger::AtTime(t),
                    fired: false,
                });
            }
        }
        out.sort_by(|a, b| {
            let (ka, kb) = (a.trigger.sort_key(), b.trigger.sort_key());
            ka.0.cmp(&kb.0)
                .then(ka.1.total_cmp(&kb.1))
                .then(ka.2.cmp(&kb.2))
                .then(ka.3.cmp(&kb.3))
                .then(ka.4.cmp(&kb.4))
                .then(a.pids.cmp(&b.pids))
        });
        Ok(out)
    }
}

/// First failure time of each node, exponential with mean `mtbf_ind`.
pub fn sample_node_failures(num_nodes: usize, mtbf_ind: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    let exp = Exp::new(1.0 / mtbf_ind).expect("mtbf must be positive");
    (0..num_nodes).map(|_| exp.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::system_mtbf;

    #[test]
    fn node_victims_expand_to_consecutive_ranks() {
        let s = FaultSchedule::none()
            .with_mtbf(1.0, 4)
            .kill_node(1, FaultTrigger::AtTime(3.0));
        let s = FaultSchedule { mtbf_ind: None, ..s };
        let faults = s.materialize(8, 0).unwrap();
        assert_eq!(faults[0].pids, vec![ProcId(4), ProcId(5), ProcId(6), ProcId(7)]);
    }

    #[test]
    fn duplicate_victims_are_rejected() {
        let s = FaultSchedule::none()
            .kill(2, FaultTrigger::AtTime(1.0))
            .kill(2, FaultTrigger::at_phase(3, Phase::Compute));
        assert!(s.validate(4).is_err());
        assert!(FaultSchedule::none().kill(9, FaultTrigger::AtTime(1.0)).validate(4).is_err());
    }

    #[test]
    fn entries_come_out_sorted() {
        let s = FaultSchedule::none()
            .kill(0, FaultTrigger::at_phase(9, Phase::Compute))
            .kill(1, FaultTrigger::AtTime(5.0))
            .kill(2, FaultTrigger::at_phase(3, Phase::Compute))
            .kill(3, FaultTrigger::AtTime(1.0));
        let order: Vec<u32> = s.materialize(4, 0).unwrap().iter().map(|f| f.pids[0].0).collect();
        assert_eq!(order, vec![3, 1, 2, 0]);
    }

    /// Exponential sampler against the system MTBF: the first failure among
    /// 8 nodes with an 8 h node MTBF should average 1 h.
    #[test]
    fn first_failure_mean_matches_system_mtbf() {
        let mu_ind = 8.0 * 3600.0;
        let expected = system_mtbf(mu_ind, 8);
        assert_eq!(expected, 3600.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 10_000;
        let mean = (0..draws)
            .map(|_| {
                sample_node_failures(8, mu_ind, &mut rng)
                    .into_iter()
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / draws as f64;
        assert!((mean - expected).abs() / expected < 0.05, "mean {mean}");
    }

    #[test]
    fn stochastic_draws_are_seeded() {
        let s = FaultSchedule::none().with_mtbf(100.0, 2);
        let a = s.materialize(8, 7).unwrap();
        assert_eq!(a, s.materialize(8, 7).unwrap());
        assert_ne!(a, s.materialize(8, 8).unwrap());
        assert_eq!(a.len(), 4);
    }
}
