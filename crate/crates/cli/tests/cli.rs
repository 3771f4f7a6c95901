use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn memckpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memckpt")).args(args).output().unwrap()
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(name: &str) -> Output {
    memckpt(&["run", scenario(name).to_str().unwrap(), "-o", "-"])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn reference_and_single_fault_agree() {
    let clean = run("reference.cfg");
    let faulty = run("single_fault.cfg");
    assert_eq!(clean.status.code(), Some(0), "{}", stderr(&clean));
    assert_eq!(faulty.status.code(), Some(0), "{}", stderr(&faulty));
    assert!(stderr(&clean).contains("0 fault(s), final checksum 0xbe71da0169cf948d"));
    assert!(stderr(&faulty).contains("1 fault(s), final checksum 0xbe71da0169cf948d"));
    let csv = String::from_utf8(faulty.stdout).unwrap();
    assert!(csv.lines().any(|l| l.contains(",restore,")));
}

#[test]
fn pair_kill_is_data_loss() {
    let o = run("pair_kill.cfg");
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("data loss"));
}

#[test]
fn stochastic_node_failures_complete() {
    let o = run("node_mtbf.cfg");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!stderr(&o).contains(" 0 fault(s)"));
}

#[test]
fn report_is_deterministic() {
    let a = run("node_mtbf.cfg");
    let b = run("node_mtbf.cfg");
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn output_file_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let o = memckpt(&["run", scenario("reference.cfg").to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    assert!(std::fs::read_to_string(out).unwrap().lines().count() > 1);
}

#[test]
fn bad_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "global_cells = 16x16x8\nblock_cells = 5x4x4\n").unwrap();
    let o = memckpt(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("memckpt: "));
    let missing = memckpt(&["run", dir.path().join("nope.cfg").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn sweep_rejects_empty_or_bad_intervals() {
    let cfg = scenario("waste_sweep.cfg");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(memckpt(&["sweep", cfg, "--intervals", ","]).status.code(), Some(2));
    assert_eq!(memckpt(&["sweep", cfg, "--intervals", "-5"]).status.code(), Some(2));
    assert_eq!(memckpt(&["sweep", cfg, "--intervals", "5parsecs"]).status.code(), Some(2));
    assert_eq!(memckpt(&["sweep", cfg]).status.code(), Some(2));
}

#[test]
fn sweep_emits_one_row_per_interval() {
    let cfg = scenario("waste_sweep.cfg");
    let o = memckpt(&["sweep", cfg.to_str().unwrap(), "--intervals", "56s,224.5,15min"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "interval_s,mean_completion_s,mean_commits,mean_aborts");
    assert_eq!(lines.len(), 4);
    let mean = |l: &str| l.split(',').nth(1).unwrap().parse::<f64>().unwrap();
    assert!(mean(lines[2]) < mean(lines[1]) && mean(lines[2]) < mean(lines[3]));
}

#[test]
fn plan_table() {
    let o = memckpt(&["plan", "--mu-ind", "8h", "--nodes", "8", "--c", "7s", "--s", "1GiB"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("3600.0 s"));
    assert!(text.contains("224.50 s"));
    assert!(text.contains("3.12 %"));
    assert!(text.contains("5x (r=2, resilient)"));
    assert!(text.contains(&format!("{} B", 5u64 << 30)));
}

#[test]
fn plan_csv_and_modes() {
    let o = memckpt(&["plan", "--mu-ind", "3600", "--nodes", "1", "--c", "7", "--csv", "--non-resilient"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("quantity,value,unit\n"));
    assert!(text.contains("memory_factor,3,x"));
    let warn = memckpt(&["plan", "--mu-ind", "10s", "--nodes", "1", "--c", "5s"]);
    assert!(warn.status.success());
    assert!(stderr(&warn).contains("warning"));
    assert_eq!(memckpt(&["plan", "--mu-ind", "0s", "--nodes", "1", "--c", "5s"]).status.code(), Some(2));
    assert_eq!(memckpt(&["plan", "--mu-ind", "1h", "--nodes", "1", "--c", "5s", "--r", "0"]).status.code(), Some(2));
}
