use memckpt_core::runtime::SimOptions;
use memckpt_core::{
    reference_checksum, run_scenario, simulate_run, CheckpointConfig, CostModel, DomainSpec, FaultSchedule,
    FaultTrigger, Outcome, Phase, RunConfig, ScenarioConfig,
};

fn config(n: usize) -> RunConfig {
    RunConfig {
        spec: DomainSpec::new([16, 16, 8], [4, 4, 4], n).with_fields(12),
        total_steps: 100,
        dt: 0.1,
        seed: 7,
        checkpoint: CheckpointConfig::new(10),
    }
}

#[test]
fn single_fault_matches_serial_reference() {
    let cfg = config(8);
    let faults = FaultSchedule::none().kill(3, FaultTrigger::at_phase(37, Phase::Compute));
    let run = simulate_run(&cfg, &faults, CostModel::default(), SimOptions::default()).unwrap();
    assert_eq!(run.report.outcome, Outcome::Completed);
    assert_eq!(run.report.final_checksum, Some(reference_checksum(&cfg.spec, 100, 0.1, 7).unwrap()));
}

#[test]
fn partner_pair_loss_is_reported() {
    let cfg = config(8);
    let faults = FaultSchedule::none()
        .kill(1, FaultTrigger::at_phase(42, Phase::Compute))
        .kill(5, FaultTrigger::at_phase(44, Phase::Compute));
    let run = simulate_run(&cfg, &faults, CostModel::default(), SimOptions::default()).unwrap();
    assert_eq!(run.report.outcome, Outcome::DataLoss);
    assert_eq!(run.report.final_checksum, None);
}

#[test]
fn scenario_text_drives_a_run() {
    let text = "\
global_cells = 16x16x8
block_cells = 4x4x4
fields_per_cell = 12
num_processes = 8
total_steps = 100
checkpoint_interval = 10
seed = 7
fault = rank 6 phase handshake step 40 ops 1
";
    let scenario = ScenarioConfig::parse(text).unwrap();
    assert_eq!(ScenarioConfig::parse(&scenario.to_string()).unwrap(), scenario);
    let run = run_scenario(&scenario).unwrap();
    assert_eq!(run.report.faults(), 1);
    assert_eq!(run.report.final_checksum, Some(reference_checksum(&config(8).spec, 100, 0.1, 7).unwrap()));
}
