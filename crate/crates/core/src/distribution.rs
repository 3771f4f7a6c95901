//! Where each rank's snapshot copy goes, and shipping it there.

use crate::grid::Rank;
use crate::runtime::{CommError, RankHandle, Tag};
use crate::snapshot::HeldCopy;

/// Partner assignment for one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionPlan {
    /// Single process: the only copy is the local one.
    LocalOnly,
    Partner { send_to: Rank, recv_from: Rank },
}

impl DistributionPlan {
    /// Destination of this rank's copy; the rank itself when local-only.
    pub fn send_to_or(self, me: Rank) -> Rank {
        match self {
            DistributionPlan::LocalOnly => me,
            DistributionPlan::Partner { send_to, .. } => send_to,
        }
    }

    pub fn recv_from_or(self, me: Rank) -> Rank {
        match self {
            DistributionPlan::LocalOnly => me,
            DistributionPlan::Partner { recv_from, .. } => recv_from,
        }
    }
}

/// A pure placement rule `(rank, n) -> plan`. Must be globally consistent:
/// whoever `r` expects a copy from sends it to `r`.
pub type DistributionStrategy = fn(Rank, usize) -> DistributionPlan;

/// Each rank sends to the rank `floor(n/2)` ahead of it, wrapping around.
/// For even `n` this pairs `r` with `r + n/2`; for odd `n` it is a cycle.
pub fn pairwise_plan(rank: Rank, n: usize) -> DistributionPlan {
    assert!(n >= 1 && rank < n, "rank {rank} out of range for {n} processes");
    if n == 1 {
        return DistributionPlan::LocalOnly;
    }
    let shift = n / 2;
    let send_to = (rank + shift) % n;
    let recv_from = if shift > rank { n - (shift - rank) } else { rank - shift };
    DistributionPlan::Partner { send_to, recv_from }
}

/// Check `send_to(recv_from(r)) == r` for every rank of an `n`-process run.
pub fn is_consistent(strategy: DistributionStrategy, n: usize) -> bool {
    (0..n).all(|r| {
        let from = strategy(r, n).recv_from_or(r);
        from < n && strategy(from, n).send_to_or(from) == r
    })
}

/// Send the local encoded snapshot to the plan's target and return the copy
/// received from its source. Local-only plans exchange nothing.
pub async fn exchange_snapshots(
    rt: &RankHandle,
    local: &[u8],
    plan: DistributionPlan,
) -> Result<Option<HeldCopy>, CommError> {
    let DistributionPlan::Partner { send_to, recv_from } = plan else {
        return Ok(None);
    };
    rt.send(send_to, Tag::snapshot(), local.to_vec()).await?;
    let bytes = rt.recv(recv_from, Tag::snapshot()).await?;
    Ok(Some(HeldCopy {
        origin_rank: recv_from as u32,
        bytes,
    }))
}
