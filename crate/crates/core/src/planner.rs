//! Closed-form checkpoint planning and a Monte-Carlo waste model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("redundancy must be at least 1")]
    ZeroRedundancy,
}

fn positive(name: &'static str, value: f64) -> Result<(), PlannerError> {
    if value > 0.0 && !value.is_nan() {
        Ok(())
    } else {
        Err(PlannerError::NonPositive { name, value })
    }
}

/// System MTBF of `n_nodes` independent nodes.
pub fn system_mtbf(mu_ind: f64, n_nodes: usize) -> f64 {
    mu_ind / n_nodes as f64
}

/// First-order optimal checkpoint interval `sqrt(2 mu c)`.
pub fn optimal_interval(mu: f64, c: f64) -> f64 {
    (2.0 * mu * c).sqrt()
}

/// The first-order interval is only meaningful when checkpoints are cheap
/// relative to the MTBF.
pub fn approximation_valid(mu: f64, c: f64) -> bool {
    c < mu / 10.0
}

/// Fraction of runtime spent checkpointing at the optimal interval.
pub fn overhead_fraction(mu: f64, c: f64) -> f64 {
    (c / (2.0 * mu)).sqrt()
}

/// Multiplier on the live state size: `1 + 2r` double-buffered, `1 + r` not.
pub fn memory_factor(r: u32, resilient: bool) -> Result<u64, PlannerError> {
    if r == 0 {
        return Err(PlannerError::ZeroRedundancy);
    }
    let r = u64::from(r);
    Ok(if resilient { 1 + 2 * r } else { 1 + r })
}

pub fn memory_bytes(s: u64, r: u32, resilient: bool) -> Result<u64, PlannerError> {
    Ok(s * memory_factor(r, resilient)?)
}

/// Copy count of the pairwise scheme as used in the memory model.
pub const PAIRWISE_REDUNDANCY: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerInputs {
    /// Node MTBF in seconds. Infinite means no failures.
    pub mu_ind: f64,
    pub num_nodes: usize,
    pub checkpoint_cost: f64,
    pub recovery_cost: f64,
    pub redundancy: u32,
    pub resilient: bool,
}

/// Everything `plan` reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plan {
    pub system_mtbf: f64,
    pub optimal_interval: f64,
    pub overhead: f64,
    pub memory_factor: u64,
    pub approximation_valid: bool,
}

impl PlannerInputs {
    pub fn new(mu_ind: f64, num_nodes: usize, checkpoint_cost: f64) -> Self {
        Self {
            mu_ind,
            num_nodes,
            checkpoint_cost,
            recovery_cost: 1.0,
            redundancy: PAIRWISE_REDUNDANCY,
            resilient: true,
        }
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        positive("mu_ind", self.mu_ind)?;
        positive("num_nodes", self.num_nodes as f64)?;
        positive("checkpoint_cost", self.checkpoint_cost)?;
        if self.recovery_cost.is_nan() || self.recovery_cost < 0.0 {
            return Err(PlannerError::NonPositive {
                name: "recovery_cost",
                value: self.recovery_cost,
            });
        }
        if self.redundancy == 0 {
            return Err(PlannerError::ZeroRedundancy);
        }
        Ok(())
    }

    pub fn system_mtbf(&self) -> f64 {
        system_mtbf(self.mu_ind, self.num_nodes)
    }

    pub fn plan(&self) -> Result<Plan, PlannerError> {
        self.validate()?;
        let mu = self.system_mtbf();
        let c = self.checkpoint_cost;
        Ok(Plan {
            system_mtbf: mu,
            optimal_interval: optimal_interval(mu, c),
            overhead: overhead_fraction(mu, c),
            memory_factor: memory_factor(self.redundancy, self.resilient)?,
            approximation_valid: approximation_valid(mu, c),
        })
    }
}

/// Mean wall time to finish `horizon` seconds of useful work when a checkpoint
/// of cost C follows every `interval` seconds of work (the last segment may be
/// shorter). A failure discards work since the last completed checkpoint and
/// costs `recovery_cost`, during which further failures may strike.
///
/// Trial `i` always draws from the same random stream, so sweeps over
/// `interval` with one seed use common random numbers.
pub fn simulate_waste(interval: f64, inputs: &PlannerInputs, horizon: f64, trials: usize, seed: u64) -> f64 {
    simulate_waste_stats(interval, inputs, horizon, trials, seed).mean_time
}

/// Per-trial means from [`simulate_waste`]'s model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WasteStats {
    pub mean_time: f64,
    /// Checkpoints that completed.
    pub mean_commits: f64,
    /// Work segments lost to a failure.
    pub mean_aborts: f64,
}

pub fn simulate_waste_stats(interval: f64, inputs: &PlannerInputs, horizon: f64, trials: usize, seed: u64) -> WasteStats {
    assert!(interval > 0.0, "interval must be positive");
    assert!(trials > 0, "need at least one trial");
    let mu = inputs.system_mtbf();
    let c = inputs.checkpoint_cost;
    let rec = inputs.recovery_cost;
    let exp = mu.is_finite().then(|| Exp::new(1.0 / mu).expect("positive rate"));
    let (mut total, mut commits, mut aborts) = (0.0, 0u64, 0u64);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let mut draw = || exp.as_ref().map_or(f64::INFINITY, |e| e.sample(&mut rng));
        let mut t = 0.0;
        let mut done = 0.0;
        let mut next_fault = draw();
        while done < horizon {
            let seg = interval.min(horizon - done);
            if t + seg + c <= next_fault {
                t += seg + c;
                done += seg;
                commits += 1;
                continue;
            }
            aborts += 1;
            t = next_fault;
            next_fault = t + draw();
            while t + rec > next_fault {
                t = next_fault;
                next_fault = t + draw();
            }
            t += rec;
        }
        total += t;
    }
    let n = trials as f64;
    WasteStats {
        mean_time: total / n,
        mean_commits: commits as f64 / n,
        mean_aborts: aborts as f64 / n,
    }
}

/// `count` intervals spaced geometrically from `lo` to `hi` inclusive.
pub fn geometric_intervals(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2 && lo > 0.0 && hi > lo);
    let ratio = (hi / lo).powf(1.0 / (count - 1) as f64);
    (0..count).map(|i| lo * ratio.powi(i as i32)).collect()
}
