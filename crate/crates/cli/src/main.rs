mod serve;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use jssa_core::kinematics::{ChainConfig, JerkBounds, KinematicChain};
use jssa_core::safety_index::{verify_minimax, MinimaxConfig, SafetyIndexParams};
use jssa_core::sim::{self, library, RunResult, SafeguardMode, Scenario};

#[derive(Parser)]
#[command(name = "jssa", version, about = "Jerk-level safeguard simulator for a 6-DOF arm sharing space with people")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write telemetry.csv and metrics.csv.
    Run {
        /// Scenario JSON file, or `builtin:<name>`.
        scenario: String,
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
        /// Override the scenario's safeguard mode.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run a λ₁ × λ₂ grid and write sweep.csv.
    Sweep {
        scenario: String,
        #[arg(long, value_delimiter = ',', required = true)]
        l1: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        l2: Vec<f64>,
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
    },
    /// Check safety index parameters for feasibility.
    Verify {
        /// JSON file with lambda1, lambda2 and optional d_min, jerk_limits_deg, budget, seed.
        params: PathBuf,
    },
    /// Step a scenario in real time and stream state over a websocket.
    Serve {
        #[arg(default_value = "builtin:interactive")]
        scenario: String,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Wait for a start command before stepping.
        #[arg(long)]
        paused: bool,
    },
    /// Print a built-in scenario as JSON.
    Scenario { name: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Jssa,
    Ssa,
    Off,
}

impl From<Mode> for SafeguardMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Jssa => SafeguardMode::Jssa,
            Mode::Ssa => SafeguardMode::Ssa,
            Mode::Off => SafeguardMode::Off,
        }
    }
}

enum Outcome {
    Clean,
    Unsafe,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Unsafe) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<Outcome> {
    match command {
        Command::Run { scenario, out, mode } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(m) = mode {
                s = s.with_mode(m.into());
            }
            cmd_run(&s, &out)
        }
        Command::Sweep { scenario, l1, l2, out } => cmd_sweep(&load_scenario(&scenario)?, &l1, &l2, &out),
        Command::Verify { params } => cmd_verify(&params),
        Command::Serve { scenario, port, bind, paused } => {
            serve::serve(load_scenario(&scenario)?, &bind, port, paused)?;
            Ok(Outcome::Clean)
        }
        Command::Scenario { name } => {
            let s = library::by_name(&name).ok_or_else(|| anyhow!("no built-in scenario '{name}'"))?;
            println!("{}", s.to_json());
            Ok(Outcome::Clean)
        }
    }
}

fn load_scenario(arg: &str) -> anyhow::Result<Scenario> {
    let mut s = match arg.strip_prefix("builtin:") {
        Some(name) => library::by_name(name).ok_or_else(|| anyhow!("no built-in scenario '{name}'"))?,
        None => {
            let text = fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?;
            Scenario::from_json(&text).with_context(|| format!("parsing {arg}"))?
        }
    };
    if let Ok(seed) = std::env::var("JSSA_SEED") {
        let seed: u64 = seed.trim().parse().with_context(|| format!("JSSA_SEED '{seed}' is not an unsigned integer"))?;
        s = s.with_seed(seed);
    }
    Ok(s)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn summarize(name: &str, r: &RunResult) {
    let m = &r.metrics;
    println!(
        "{name}: min distance {:.4} m, active {:.3} s, violations {}, fallback steps {}",
        m.min_distance, m.active_duration, m.violations, m.fallback_steps
    );
}

fn cmd_run(s: &Scenario, out: &Path) -> anyhow::Result<Outcome> {
    let result = sim::run(s)?;
    sim::write_telemetry_csv(&result.telemetry, create(out, "telemetry.csv")?)?;
    sim::write_metrics_csv(&result.metrics, create(out, "metrics.csv")?)?;
    summarize(&s.name, &result);
    Ok(if result.metrics.is_clean() { Outcome::Clean } else { Outcome::Unsafe })
}

fn cmd_sweep(s: &Scenario, l1: &[f64], l2: &[f64], out: &Path) -> anyhow::Result<Outcome> {
    let rows = sim::sweep(s, l1, l2)?;
    sim::write_sweep_csv(&rows, create(out, "sweep.csv")?)?;
    for r in &rows {
        println!(
            "l1 {} l2 {}: min distance {:.4} m, active {:.3} s, fallback steps {}",
            r.lambda1, r.lambda2, r.metrics.min_distance, r.metrics.active_duration, r.metrics.fallback_steps
        );
    }
    Ok(if rows.iter().all(|r| r.metrics.is_clean()) { Outcome::Clean } else { Outcome::Unsafe })
}

fn default_d_min() -> f64 {
    0.05
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyFile {
    #[serde(default = "default_d_min")]
    d_min: f64,
    lambda1: f64,
    lambda2: f64,
    jerk_limits_deg: Option<Vec<f64>>,
    chain: Option<ChainConfig>,
    budget: Option<usize>,
    seed: Option<u64>,
    /// Sampling domain; the tool-region preset when absent.
    minimax: Option<MinimaxConfig>,
}

fn cmd_verify(path: &Path) -> anyhow::Result<Outcome> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: VerifyFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let chain = match file.chain {
        Some(c) => KinematicChain::from_config(c)?,
        None => KinematicChain::default_six_dof(),
    };
    let bounds = match &file.jerk_limits_deg {
        Some(l) => JerkBounds::symmetric_degrees(l)?,
        None => JerkBounds::default_six_dof(),
    };
    let mut cfg = file.minimax.unwrap_or_else(MinimaxConfig::tool_region);
    if let Some(b) = file.budget {
        cfg.budget = b;
    }
    if let Some(s) = file.seed {
        cfg.seed = s;
    }
    let params = SafetyIndexParams::new(file.d_min, file.lambda1, file.lambda2);
    let report = verify_minimax(&params, &bounds, &chain, &cfg)?;
    println!("roots negative real: {}", report.roots_negative_real);
    println!(
        "sampled: {} evaluated, {} unreachable, worst value {:.6e}, passed {}",
        report.evaluated, report.unreachable, report.worst_value, report.sampled_passed
    );
    if let Some(w) = &report.worst {
        println!("worst sample: {}", serde_json::to_string(w)?);
    }
    if report.passed {
        println!("verified");
        Ok(Outcome::Clean)
    } else {
        println!("not verified");
        Ok(Outcome::Unsafe)
    }
}
