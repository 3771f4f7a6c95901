use super::*;
use crate::runtime::{FaultTrigger, Victim};

fn spec(n: usize) -> DomainSpec {
    DomainSpec::new([16, 8, 8], [4, 4, 4], n).with_fields(2)
}

fn config(n: usize, total: u64, interval: u64) -> RunConfig {
    RunConfig {
        spec: spec(n),
        total_steps: total,
        dt: 0.1,
        seed: 11,
        checkpoint: CheckpointConfig::new(interval),
    }
}

fn run(cfg: &RunConfig, schedule: FaultSchedule) -> RunArtifacts {
    simulate_run(
        cfg,
        &schedule,
        CostModel::default(),
        SimOptions {
            trace_boundaries: true,
        },
    )
    .unwrap()
}

fn reference(cfg: &RunConfig) -> u64 {
    reference_checksum(&cfg.spec, cfg.total_steps, cfg.dt, cfg.seed).unwrap()
}

fn ctx(old: usize, dead: &[usize]) -> RecoveryContext {
    let mut next = 0;
    let reassignment = (0..old)
        .map(|r| {
            (!dead.contains(&r)).then(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    RecoveryContext {
        old_nprocs: old,
        reassignment,
        strategy: pairwise_plan,
    }
}

fn restore_events(a: &RunArtifacts) -> Vec<&crate::metrics::Event> {
    a.report.events_of(EventKind::Restore).collect()
}

#[test]
fn resolve_hand_traced() {
    assert_eq!(resolve_recovery_rank(1, &ctx(8, &[1])), Ok(4));
    for r in 0..8 {
        assert_eq!(resolve_recovery_rank(r, &ctx(8, &[])), Ok(r));
    }
    assert_eq!(
        resolve_recovery_rank(1, &ctx(8, &[1, 5])),
        Err(Unrecoverable { old_rank: 1, backup: 5 })
    );
    // Odd n: rank 0 sends to rank 2.
    assert_eq!(resolve_recovery_rank(0, &ctx(5, &[0])), Ok(1));
    assert!(resolve_recovery_rank(0, &ctx(1, &[0])).is_err());
}

#[test]
fn rebalance_hand_traced() {
    let even = BlockMap::from_owners(vec![0, 0, 1, 1, 2, 2, 3, 3], 4);
    assert!(rebalance_greedy(&even).0.is_empty());

    let single = BlockMap::from_owners(vec![0; 4], 1);
    assert!(rebalance_greedy(&single).0.is_empty());

    let absorbed = BlockMap::from_owners(vec![0, 0, 1, 1, 2, 2, 3, 3, 0, 0], 4);
    let (moves, after) = rebalance_greedy(&absorbed);
    assert_eq!(
        moves,
        vec![Migration {
            block: BlockId(0),
            from: 0,
            to: 1
        }]
    );
    assert_eq!(after.loads(), vec![3, 3, 2, 2]);
}

#[test]
fn rebalance_always_levels_loads() {
    for n in 1..7 {
        for blocks in n..40 {
            let owners = (0..blocks).map(|b| (b * b + 3 * b) % n).collect();
            let (_, after) = rebalance_greedy(&BlockMap::from_owners(owners, n));
            let loads = after.loads();
            assert!(loads.iter().max().unwrap() - loads.iter().min().unwrap() <= 1);
        }
    }
}

#[test]
fn fault_free_run_matches_serial_reference() {
    for n in [1, 2, 3, 4, 8] {
        let cfg = config(n, 20, 5);
        let a = run(&cfg, FaultSchedule::none());
        assert_eq!(a.report.outcome, Outcome::Completed);
        assert_eq!(a.report.faults(), 0);
        assert_eq!(a.report.final_step, 20);
        assert_eq!(a.report.final_checksum, Some(reference(&cfg)), "n={n}");
    }
}

#[test]
fn fault_free_rounds_commit_on_every_rank() {
    let cfg = config(4, 20, 10);
    let a = run(&cfg, FaultSchedule::none());
    let mut commits: Vec<(usize, u64)> = a.report.events_of(EventKind::Commit).map(|e| (e.rank, e.step)).collect();
    commits.sort_unstable();
    let expected: Vec<(usize, u64)> = (0..4).flat_map(|r| [(r, 0), (r, 10), (r, 20)]).collect();
    assert_eq!(commits, expected);
}

#[test]
fn fault_at_37_rolls_back_to_30() {
    let cfg = config(8, 50, 10);
    let a = run(&cfg, FaultSchedule::none().kill(3, FaultTrigger::at_phase(37, Phase::Compute)));
    assert_eq!(a.report.outcome, Outcome::Completed);
    assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
    let restores = restore_events(&a);
    assert_eq!(restores.len(), 7);
    assert!(restores.iter().all(|e| e.step == 30));
    assert_eq!(a.report.survivors, vec![0, 1, 2, 4, 5, 6, 7]);
}

#[test]
fn lone_survivor_restores_both_halves() {
    let cfg = config(2, 12, 5);
    let a = run(&cfg, FaultSchedule::none().kill(1, FaultTrigger::at_phase(7, Phase::GhostExchange)));
    assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
    let r0 = a.ranks[0].as_ref().unwrap();
    assert_eq!(r0.blocks.len() as u64, cfg.spec.num_blocks());
    let restore = restore_events(&a)[0];
    assert_eq!(restore.detail, "origins=0+1");
}

#[test]
fn partner_picks_up_the_lost_rank() {
    let cfg = config(8, 15, 5);
    let a = run(&cfg, FaultSchedule::none().kill(5, FaultTrigger::at_phase(6, Phase::Compute)));
    assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
    let by_rank: Vec<(usize, &str)> = restore_events(&a).iter().map(|e| (e.rank, e.detail.as_str())).collect();
    assert!(by_rank.contains(&(1, "origins=1+5")));
    assert!(by_rank.contains(&(0, "origins=0")));
}

#[test]
fn restore_sends_no_messages() {
    let cfg = config(8, 25, 5);
    for victim in [0, 3, 7] {
        let a = run(&cfg, FaultSchedule::none().kill(victim, FaultTrigger::at_phase(12, Phase::GhostExchange)));
        assert!(!restore_events(&a).is_empty());
        for r in 0..8 {
            assert_eq!(a.report.counter(r, Phase::Restore).messages, 0);
            assert_eq!(a.report.counter(r, Phase::Restore).bytes, 0);
        }
        assert!(a.report.phase_total(Phase::Rebalance).messages > 0);
    }
}

#[test]
fn rank_dies_during_snapshot_exchange() {
    let cfg = config(4, 30, 10);
    let trigger = FaultTrigger::AtPhase {
        step: Some(20),
        phase: Phase::SnapshotExchange,
        after_ops: 1,
    };
    let a = run(&cfg, FaultSchedule::none().kill(2, trigger));
    assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
    assert!(a.report.events_of(EventKind::Commit).all(|e| e.step != 20 || e.time > restore_events(&a)[0].time));
    assert!(restore_events(&a).iter().all(|e| e.step == 10));
}

#[test]
fn no_boundary_between_verdict_and_swap() {
    let cfg = config(4, 10, 5);
    let a = run(&cfg, FaultSchedule::none());
    let trace = a.trace.unwrap();
    let mut swaps = 0;
    for (i, entry) in trace.iter().enumerate() {
        if let TraceEntry::Marker { pid, label: "swap" } = entry {
            swaps += 1;
            let prev = trace[..i]
                .iter()
                .rev()
                .find(|e| matches!(e, TraceEntry::Boundary { pid: p, .. } if p == pid))
                .unwrap();
            assert!(
                matches!(prev, TraceEntry::Boundary { phase: Phase::Handshake, ops: 1, .. }),
                "{prev:?}"
            );
        }
    }
    assert_eq!(swaps, 4 * 3);
}

#[test]
fn nested_fault_during_shrink_restarts_recovery() {
    let cfg = config(8, 30, 10);
    let schedule = FaultSchedule::none()
        .kill(2, FaultTrigger::at_phase(14, Phase::Compute))
        .kill(4, FaultTrigger::AtPhase {
            step: None,
            phase: Phase::Shrink,
            after_ops: 1,
        });
    let a = run(&cfg, schedule);
    assert_eq!(a.report.outcome, Outcome::Completed);
    assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
    assert_eq!(a.report.faults(), 2);
    // Rank 4 dies between the shrink and the agreement: 7 shrinks, then 6.
    assert_eq!(a.report.events_of(EventKind::Shrink).count(), 13);
    assert_eq!(a.report.survivors, vec![0, 1, 3, 5, 6, 7]);
}

#[test]
fn second_fault_before_recommit_uses_composed_map() {
    let cfg = config(8, 40, 10);
    let schedule = FaultSchedule::none()
        .kill(1, FaultTrigger::at_phase(12, Phase::Compute))
        .kill(6, FaultTrigger::at_phase(15, Phase::GhostExchange));
    let a = run(&cfg, schedule);
    assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
    assert!(restore_events(&a).iter().all(|e| e.step == 10));
}

#[test]
fn losing_a_pair_is_data_loss() {
    let cfg = config(8, 30, 10);
    let schedule = FaultSchedule::none()
        .kill(1, FaultTrigger::at_phase(12, Phase::Compute))
        .kill(5, FaultTrigger::at_phase(15, Phase::Compute));
    let a = run(&cfg, schedule);
    assert_eq!(a.report.outcome, Outcome::DataLoss);
    assert_eq!(a.report.final_checksum, None);
    assert!(a.report.events_of(EventKind::DataLoss).count() >= 6);
}

#[test]
fn node_failure_is_survivable_when_pairs_span_nodes() {
    let cfg = config(8, 20, 5);
    let schedule = FaultSchedule {
        ranks_per_node: 2,
        ..FaultSchedule::none().kill_node(1, FaultTrigger::at_phase(7, Phase::Compute))
    };
    let a = run(&cfg, schedule);
    assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
    assert_eq!(a.report.faults(), 2);
}

#[test]
fn failure_before_first_commit_reinitializes() {
    let cfg = config(4, 10, 5);
    let a = run(&cfg, FaultSchedule::none().kill(2, FaultTrigger::at_phase(0, Phase::SnapshotExchange)));
    assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
    assert!(restore_events(&a).iter().all(|e| e.detail == "reinitialized"));
}

#[test]
fn fault_during_finalize_recovers() {
    let cfg = config(4, 10, 5);
    let a = run(&cfg, FaultSchedule::none().kill(0, FaultTrigger::at_phase(10, Phase::Finalize)));
    assert_eq!(a.report.outcome, Outcome::Completed);
    assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
    assert!(restore_events(&a).iter().all(|e| e.step == 10));
}

#[test]
fn non_resilient_recovers_outside_checkpoints() {
    let mut cfg = config(4, 20, 5);
    cfg.checkpoint = cfg.checkpoint.non_resilient();
    let a = run(&cfg, FaultSchedule::none().kill(1, FaultTrigger::at_phase(7, Phase::Compute)));
    assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
}

#[test]
fn non_resilient_fault_inside_checkpoint_is_data_loss() {
    let mut cfg = config(4, 20, 5);
    cfg.checkpoint = cfg.checkpoint.non_resilient();
    let a = run(&cfg, FaultSchedule::none().kill(1, FaultTrigger::at_phase(10, Phase::SnapshotFill)));
    assert_eq!(a.report.outcome, Outcome::DataLoss);
}

#[test]
fn resident_bytes_follow_the_buffer_count() {
    for (resilient, factor) in [(true, 5), (false, 3)] {
        let mut cfg = config(4, 5, 5);
        cfg.checkpoint.resilient_double_buffer = resilient;
        let a = run(&cfg, FaultSchedule::none());
        for r in 0..4 {
            let g = a.report.metrics.gauge(r).unwrap();
            let framing = g.snapshot_bytes - g.live_bytes;
            assert_eq!(g.resident_bytes() + framing, factor * g.snapshot_bytes);
        }
    }
}

#[test]
fn same_inputs_same_report() {
    let cfg = config(8, 20, 5);
    let schedule = FaultSchedule::none().kill(3, FaultTrigger::at_phase(8, Phase::Compute));
    let a = run(&cfg, schedule.clone()).report.to_csv();
    let b = run(&cfg, schedule).report.to_csv();
    assert_eq!(a, b);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = config(4, 10, 0);
    assert_eq!(cfg.validate(), Err(ConfigError::ZeroInterval));
    cfg.checkpoint.interval_steps = 1;
    cfg.dt = 0.2;
    assert!(matches!(cfg.validate(), Err(ConfigError::Workload(_))));
    let cfg = config(64, 10, 1);
    assert!(matches!(cfg.validate(), Err(ConfigError::TooFewBlocks { .. })));
}

#[test]
fn victim_numbering_is_initial() {
    // The second victim is named by its initial rank even after a shrink.
    let cfg = config(4, 20, 5);
    let schedule = FaultSchedule {
        entries: vec![
            crate::runtime::FaultEntry {
                victim: Victim::Rank(0),
                trigger: FaultTrigger::at_phase(3, Phase::Compute),
            },
            crate::runtime::FaultEntry {
                victim: Victim::Rank(3),
                trigger: FaultTrigger::at_phase(12, Phase::Compute),
            },
        ],
        mtbf_ind: None,
        ranks_per_node: 1,
    };
    let a = run(&cfg, schedule);
    assert_eq!(a.report.survivors, vec![1, 2]);
    assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
}

#[test]
fn stochastic_failures_never_corrupt_the_result() {
    let cfg = config(8, 40, 5);
    let horizon = run(&cfg, FaultSchedule::none()).report.total_time;
    let mut completed_with_faults = 0;
    for seed in 0..20 {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let schedule = FaultSchedule::none().with_mtbf(8.0 * horizon, 2);
        let a = run(&cfg, schedule.clone());
        assert_eq!(a.report.to_csv(), run(&cfg, schedule).report.to_csv());
        match a.report.outcome {
            Outcome::Completed => {
                assert_eq!(a.report.final_checksum, Some(reference(&cfg)));
                completed_with_faults += usize::from(a.report.faults() > 0);
            }
            Outcome::DataLoss => assert_eq!(a.report.final_checksum, None),
        }
    }
    assert!(completed_with_faults > 0);
}
