use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use memckpt_core::planner::{memory_bytes, PlannerInputs, PAIRWISE_REDUNDANCY};
use memckpt_core::scenario::{parse_duration, parse_size, run_scenario, sweep, sweep_csv, ScenarioConfig};
use memckpt_core::{Outcome, SimError};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA_LOSS: u8 = 3;
const EXIT_DEADLOCK: u8 = 4;

#[derive(Parser)]
#[command(name = "memckpt", version, about = "Diskless pairwise checkpointing on a simulated cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report CSV.
    Run {
        config: PathBuf,
        /// Report path; overrides `output` in the scenario. `-` for stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Monte-Carlo completion time for a list of checkpoint intervals.
    Sweep {
        config: PathBuf,
        /// Comma-separated intervals, e.g. `28s,56s,2min`. Bare numbers are seconds.
        #[arg(long, value_delimiter = ',', required = true)]
        intervals: Vec<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Evaluate system MTBF, optimal interval, overhead and memory factor.
    Plan {
        /// Node MTBF, e.g. `8h`.
        #[arg(long = "mu-ind")]
        mu_ind: String,
        #[arg(long)]
        nodes: usize,
        /// Checkpoint cost, e.g. `7s`.
        #[arg(long)]
        c: String,
        /// Local snapshot size, e.g. `512MiB`.
        #[arg(long)]
        s: Option<String>,
        #[arg(long, default_value_t = PAIRWISE_REDUNDANCY)]
        r: u32,
        #[arg(long)]
        non_resilient: bool,
        #[arg(long)]
        csv: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure { code, message }) => {
            eprintln!("memckpt: {message}");
            ExitCode::from(code)
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

fn config_error(message: impl ToString) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.to_string(),
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Failure> {
    match command {
        Command::Run { config, output } => run(&config, output),
        Command::Sweep {
            config,
            intervals,
            output,
        } => run_sweep(&config, &intervals, output),
        Command::Plan {
            mu_ind,
            nodes,
            c,
            s,
            r,
            non_resilient,
            csv,
        } => plan(&mu_ind, nodes, &c, s.as_deref(), r, !non_resilient, csv),
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    ScenarioConfig::parse(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    let result = match path {
        Some(p) if p != Path::new("-") => fs::write(p, text),
        _ => io::stdout().write_all(text.as_bytes()),
    };
    result.map_err(|e| config_error(format!("cannot write report: {e}")))
}

fn run(path: &Path, output: Option<PathBuf>) -> Result<ExitCode, Failure> {
    let cfg = load(path)?;
    let artifacts = run_scenario(&cfg).map_err(|e| match e {
        SimError::Deadlock { .. } => Failure {
            code: EXIT_DEADLOCK,
            message: e.to_string(),
        },
        other => config_error(other),
    })?;
    let report = &artifacts.report;
    emit(output.or(cfg.output).as_deref(), &report.to_csv())?;
    match (report.outcome, report.final_checksum) {
        (Outcome::Completed, Some(sum)) => {
            eprintln!(
                "completed step {} in {:.6} s simulated, {} fault(s), final checksum {sum:#018x}",
                report.final_step,
                report.total_time,
                report.faults()
            );
            Ok(ExitCode::SUCCESS)
        }
        _ => {
            eprintln!(
                "data loss: both holders of a snapshot failed before the next commit ({} fault(s))",
                report.faults()
            );
            Ok(ExitCode::from(EXIT_DATA_LOSS))
        }
    }
}

fn seconds(flag: &str, v: &str) -> Result<f64, Failure> {
    let secs = match v.parse::<f64>() {
        Ok(x) => x,
        Err(_) => parse_duration(v).map_err(|e| config_error(format!("{flag}: {e}")))?,
    };
    if !(secs > 0.0 && secs.is_finite()) {
        return Err(config_error(format!("{flag} must be positive, got `{v}`")));
    }
    Ok(secs)
}

fn run_sweep(path: &Path, intervals: &[String], output: Option<PathBuf>) -> Result<ExitCode, Failure> {
    let cfg = load(path)?;
    let intervals = intervals
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| seconds("--intervals", s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = sweep(&cfg, &intervals).map_err(config_error)?;
    emit(output.as_deref(), &sweep_csv(&rows))?;
    Ok(ExitCode::SUCCESS)
}

fn plan(mu_ind: &str, nodes: usize, c: &str, s: Option<&str>, r: u32, resilient: bool, csv: bool) -> Result<ExitCode, Failure> {
    let mut inputs = PlannerInputs::new(seconds("--mu-ind", mu_ind)?, nodes, seconds("--c", c)?);
    inputs.redundancy = r;
    inputs.resilient = resilient;
    let p = inputs.plan().map_err(config_error)?;
    let size = match s {
        Some(v) => {
            let bytes = v.parse::<f64>().or_else(|_| parse_size(v)).map_err(|e| config_error(format!("--s: {e}")))?;
            if !(bytes > 0.0 && bytes.fract() == 0.0) {
                return Err(config_error(format!("--s must be a positive whole number of bytes, got `{v}`")));
            }
            Some(memory_bytes(bytes as u64, r, resilient).map_err(config_error)?)
        }
        None => None,
    };
    if !p.approximation_valid {
        eprintln!("warning: checkpoint cost is not small against the system MTBF; the first-order interval is unreliable");
    }
    let mode = if resilient { "resilient" } else { "non-resilient" };
    let mut out = String::new();
    if csv {
        out.push_str("quantity,value,unit\n");
        out.push_str(&format!("system_mtbf,{},s\n", p.system_mtbf));
        out.push_str(&format!("optimal_interval,{},s\n", p.optimal_interval));
        out.push_str(&format!("overhead,{},fraction\n", p.overhead));
        out.push_str(&format!("memory_factor,{},x\n", p.memory_factor));
        if let Some(m) = size {
            out.push_str(&format!("memory,{m},B\n"));
        }
    } else {
        out.push_str(&format!("system MTBF        {:.1} s\n", p.system_mtbf));
        out.push_str(&format!("optimal interval   {:.2} s\n", p.optimal_interval));
        out.push_str(&format!("overhead           {:.2} %\n", 100.0 * p.overhead));
        out.push_str(&format!("memory factor      {}x (r={r}, {mode})\n", p.memory_factor));
        if let Some(m) = size {
            out.push_str(&format!("memory             {m} B\n"));
        }
    }
    emit(None, &out)?;
    Ok(ExitCode::SUCCESS)
}
