//! Command-line front end for the experiment harness.
//!
//! Exit codes: 0 success, 1 configuration error, 2 run failure, 3 a check
//! exceeded its threshold.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use optimarl::harness::{
    duality_check_command, eval_exact, grad_check, nash_check, run_experiment, summary_csv, Algorithm,
    ExperimentConfig, ExperimentKind,
};
use optimarl::Error;

#[derive(Parser, Debug)]
#[command(name = "optimarl", version, about = "Optimistic multi-agent RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a gridworld or ball-balancing experiment over seeds.
    Run(Flags),
    /// Compare exact optimistic gradients with finite differences.
    GradCheck(Flags),
    /// Certify the gridworld equilibria.
    NashCheck(Flags),
    /// Check the per-state dual representation of the optimistic value.
    DualityCheck(Flags),
    /// Exact optimistic evaluation of the uniform policy.
    EvalExact(Flags),
}

#[derive(Args, Debug)]
struct Flags {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed to run; repeat for several. Replaces the config's seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Risk parameter; replaces the config's betas and the check betas.
    #[arg(long)]
    beta: Option<f64>,
    /// Single algorithm to run, e.g. optimistic_pg or hysteretic_q.
    #[arg(long)]
    algo: Option<String>,
    /// Worker threads for independent seeds.
    #[arg(long)]
    jobs: Option<usize>,
}

enum Failure {
    Config(String),
    Run(String),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn load_config(flags: &Flags) -> Result<ExperimentConfig, Failure> {
    let mut config = match &flags.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &flags.out {
        config.out_dir = Some(out.clone());
    }
    if !flags.seeds.is_empty() {
        config.seeds = flags.seeds.clone();
    }
    if let Some(beta) = flags.beta {
        config.betas = vec![beta];
        config.grad_check.beta = beta;
        config.duality_check.beta = beta;
    }
    if let Some(name) = &flags.algo {
        config.algorithms = vec![Algorithm::parse(name)?];
    }
    if flags.jobs.is_some() {
        config.jobs = flags.jobs;
    }
    Ok(config)
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::Run(e.to_string()))
}

fn write_report(config: &ExperimentConfig, name: &str, json: &str) -> Result<(), Failure> {
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Run(e.to_string()))?;
        std::fs::write(dir.join(name), format!("{json}\n")).map_err(|e| Failure::Run(e.to_string()))?;
    }
    Ok(())
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(flags) => {
            let config = load_config(&flags)?;
            if !config.kind.is_run() {
                return Err(Failure::Config(format!(
                    "run needs a gridworld_exact, gridworld_sampled or ball_balancing config, got {:?}",
                    config.kind
                )));
            }
            let outcome = run_experiment(&config)?;
            print!("{}", summary_csv(&outcome.summaries));
            if !outcome.failures.is_empty() {
                return Err(Failure::Run(format!("{} run(s) failed", outcome.failures.len())));
            }
            Ok(())
        }
        Command::GradCheck(flags) => {
            let mut config = load_config(&flags)?;
            config.kind = ExperimentKind::GradCheck;
            config.validate()?;
            let report = grad_check(&config.grad_check)?;
            let json = to_json(&report)?;
            println!("{json}");
            write_report(&config, "grad_check.json", &json)?;
            report.passed.then_some(()).ok_or(Failure::Check)
        }
        Command::NashCheck(flags) => {
            let mut config = load_config(&flags)?;
            config.kind = ExperimentKind::NashCheck;
            config.validate()?;
            let report = nash_check(&config.gridworld, &config.nash_check)?;
            let json = to_json(&report)?;
            println!("{json}");
            write_report(&config, "nash_check.json", &json)?;
            report.passed.then_some(()).ok_or(Failure::Check)
        }
        Command::DualityCheck(flags) => {
            let mut config = load_config(&flags)?;
            config.kind = ExperimentKind::DualityCheck;
            config.validate()?;
            let report = duality_check_command(&config.duality_check)?;
            let json = to_json(&report)?;
            println!("{json}");
            write_report(&config, "duality_check.json", &json)?;
            report.passed.then_some(()).ok_or(Failure::Check)
        }
        Command::EvalExact(flags) => {
            let config = load_config(&flags)?;
            let summaries = eval_exact(&config)?;
            for s in &summaries {
                println!(
                    "beta={} start_value={} risk_neutral={} residual={} iterations={}",
                    s.beta, s.start_value, s.risk_neutral_start_value, s.residual, s.iterations
                );
            }
            write_report(&config, "evaluation.json", &to_json(&summaries)?)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("run failed: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => {
            eprintln!("check failed: threshold exceeded");
            ExitCode::from(3)
        }
    }
}
