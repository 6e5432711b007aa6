//! Experiment harness: validated configuration, seeded runs (optionally in
//! parallel), the numeric check commands, and CSV/JSON emission.
//!
//! Output is deterministic: tasks are joined in configuration order, floats
//! are written in shortest round-trip form, and wall-clock times are kept
//! out of every file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{
    build_ball_balancing, build_gridworld, grid_cell, gridworld_transit_policy, BallBalanceConfig, GridworldConfig,
    GRID_SIZE,
};
use crate::error::{Error, Result};
use crate::instances::{random_game, random_interior_policy, random_sum_zero_direction};
use crate::learners::{
    argmax, decentralized_q_learning_run, hysteretic_q_learning_run, optimistic_policy_update_run, BaselineConfig,
    EvalConfig, LearningOutcome, RunStreams, UpdateConfig, UpdateMode,
};
use crate::mdp::{
    finite_horizon_return, optimal_deterministic_policy, risk_neutral_evaluation, visitation_distribution,
    FactoredPolicy, MultiAgentTabularGame,
};
use crate::optimistic::{
    check_deterministic_nash, classical_policy_gradient, evaluate, exact_policy_gradient, finite_difference_gradient,
    projected_step, risk_neutral_averaged_q, NashReport, GRADIENT_TOLERANCE, NASH_TOLERANCE,
};
use crate::risk::{duality_check, simplex_grid, Distribution, RiskParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Projected updates on exactly computed tables.
    #[default]
    GridworldExact,
    GridworldSampled,
    BallBalancing,
    GradCheck,
    NashCheck,
    DualityCheck,
}

impl ExperimentKind {
    pub fn is_run(self) -> bool {
        matches!(
            self,
            ExperimentKind::GridworldExact | ExperimentKind::GridworldSampled | ExperimentKind::BallBalancing
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    OptimisticPg,
    OptimisticGreedy,
    DecentralizedQ,
    HystereticQ,
    /// Classical projected policy gradient on the linear average of `Q⁰`.
    RiskNeutralPg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::OptimisticPg,
        Algorithm::OptimisticGreedy,
        Algorithm::DecentralizedQ,
        Algorithm::HystereticQ,
        Algorithm::RiskNeutralPg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::OptimisticPg => "optimistic_pg",
            Algorithm::OptimisticGreedy => "optimistic_greedy",
            Algorithm::DecentralizedQ => "decentralized_q",
            Algorithm::HystereticQ => "hysteretic_q",
            Algorithm::RiskNeutralPg => "risk_neutral_pg",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {name:?}")))
    }

    pub fn is_optimistic(self) -> bool {
        matches!(self, Algorithm::OptimisticPg | Algorithm::OptimisticGreedy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub n_games: usize,
    pub directions: usize,
    /// Games have between 2 and `max_states` states, two agents with two
    /// actions each and `γ = 0.9`.
    pub max_states: usize,
    pub beta: f64,
    pub h: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n_games: 20,
            directions: 10,
            max_states: 5,
            beta: 1.0,
            h: 1e-5,
            threshold: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualityCheckConfig {
    pub n_games: usize,
    pub n_states: usize,
    pub action_counts: Vec<usize>,
    pub beta: f64,
    /// Simplex grid spacing is `1 / resolution`.
    pub resolution: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for DualityCheckConfig {
    fn default() -> Self {
        Self {
            n_games: 10,
            n_states: 3,
            action_counts: vec![3],
            beta: 1.0,
            resolution: 40,
            tolerance: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NashCheckConfig {
    pub tolerance: f64,
}

impl Default for NashCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: NASH_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub algorithms: Vec<Algorithm>,
    /// Optimistic algorithms run once per entry.
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    /// Worker threads for independent seeds; all cores when unset.
    pub jobs: Option<usize>,
    /// Policy-update settings. In exact mode only `eta`, `mode` (ignored;
    /// implied by the algorithm) and `outer_iterations` apply.
    pub update: UpdateConfig,
    /// Sampled optimistic evaluation. For ball balancing an unset
    /// `reset_period` defaults to the episode length.
    pub evaluation: EvalConfig,
    pub baseline: BaselineConfig,
    /// Scoring blocks for the Q-learning baselines.
    pub baseline_blocks: usize,
    pub gridworld: GridworldConfig,
    pub ball: BallBalanceConfig,
    pub grad_check: GradCheckConfig,
    pub duality_check: DualityCheckConfig,
    pub nash_check: NashCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::GridworldExact,
            algorithms: vec![Algorithm::RiskNeutralPg, Algorithm::OptimisticPg],
            betas: vec![1.0],
            seeds: vec![0],
            out_dir: None,
            jobs: None,
            update: UpdateConfig {
                outer_iterations: 200,
                ..UpdateConfig::default()
            },
            evaluation: EvalConfig::default(),
            baseline: BaselineConfig::default(),
            baseline_blocks: 50,
            gridworld: GridworldConfig::default(),
            ball: BallBalanceConfig::default(),
            grad_check: GradCheckConfig::default(),
            duality_check: DualityCheckConfig::default(),
            nash_check: NashCheckConfig::default(),
        }
    }
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {x}")))
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Checks every field that the configured kind uses, before any work.
    pub fn validate(&self) -> Result<()> {
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be positive".into()));
        }
        match self.kind {
            ExperimentKind::GradCheck => {
                let g = &self.grad_check;
                positive("grad_check.beta", g.beta)?;
                positive("grad_check.h", g.h)?;
                positive("grad_check.threshold", g.threshold)?;
                if g.max_states < 2 {
                    return Err(Error::Config("grad_check.max_states must be at least 2".into()));
                }
                return Ok(());
            }
            ExperimentKind::DualityCheck => {
                let d = &self.duality_check;
                positive("duality_check.beta", d.beta)?;
                positive("duality_check.tolerance", d.tolerance)?;
                if d.n_states == 0 || d.resolution == 0 || d.action_counts.is_empty() || d.action_counts.contains(&0) {
                    return Err(Error::Config("duality_check sizes must be positive".into()));
                }
                return Ok(());
            }
            ExperimentKind::NashCheck => {
                positive("nash_check.tolerance", self.nash_check.tolerance)?;
                return build_gridworld(&self.gridworld).map(|_| ()).map_err(as_config);
            }
            _ => {}
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("algorithms must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.algorithms.iter().any(|a| a.is_optimistic()) {
            if self.betas.is_empty() {
                return Err(Error::Config("optimistic algorithms need at least one beta".into()));
            }
            for &b in &self.betas {
                positive("beta", b)?;
            }
        }
        self.update.validate()?;
        if self.update.outer_iterations == 0 {
            return Err(Error::Config("update.outer_iterations must be positive".into()));
        }
        match self.kind {
            ExperimentKind::GridworldExact => {
                for a in &self.algorithms {
                    if matches!(a, Algorithm::DecentralizedQ | Algorithm::HystereticQ) {
                        return Err(Error::Config(format!(
                            "{} is sample-based; use gridworld_sampled",
                            a.name()
                        )));
                    }
                }
                build_gridworld(&self.gridworld).map_err(as_config)?;
            }
            ExperimentKind::GridworldSampled | ExperimentKind::BallBalancing => {
                if self.algorithms.contains(&Algorithm::RiskNeutralPg) {
                    return Err(Error::Config(
                        "risk_neutral_pg is only available in gridworld_exact".into(),
                    ));
                }
                self.evaluation.validate()?;
                self.baseline.validate()?;
                if self.baseline_blocks == 0 {
                    return Err(Error::Config("baseline_blocks must be positive".into()));
                }
                if self.kind == ExperimentKind::BallBalancing {
                    build_ball_balancing(&self.ball).map_err(as_config)?;
                } else {
                    build_gridworld(&self.gridworld).map_err(as_config)?;
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    fn is_gridworld(&self) -> bool {
        matches!(
            self.kind,
            ExperimentKind::GridworldExact | ExperimentKind::GridworldSampled
        )
    }

    fn build_game(&self) -> Result<MultiAgentTabularGame> {
        if self.kind == ExperimentKind::BallBalancing {
            build_ball_balancing(&self.ball)
        } else {
            build_gridworld(&self.gridworld)
        }
    }

    fn eval_config(&self) -> EvalConfig {
        let mut eval = self.evaluation.clone();
        if self.kind == ExperimentKind::BallBalancing && eval.reset_period.is_none() {
            eval.reset_period = Some(self.ball.episode_length as u64);
        }
        eval
    }

    /// `(algorithm, beta)` pairs in output order.
    pub fn tasks(&self) -> Vec<(Algorithm, Option<f64>)> {
        let mut out = Vec::new();
        for &a in &self.algorithms {
            if a.is_optimistic() {
                out.extend(self.betas.iter().map(|&b| (a, Some(b))));
            } else {
                out.push((a, None));
            }
        }
        out
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

pub fn task_label(algorithm: Algorithm, beta: Option<f64>) -> String {
    match beta {
        Some(b) => format!("{}(beta={b})", algorithm.name()),
        None => algorithm.name().to_string(),
    }
}

/// One seeded run of one algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub algorithm: Algorithm,
    pub beta: Option<f64>,
    pub seed: u64,
    /// Position of this run's seed in the configured seed list.
    pub seed_index: usize,
    /// Score of the policy after every outer iteration (or block).
    pub returns: Vec<f64>,
    pub final_return: f64,
    pub final_policy: FactoredPolicy,
    /// Normalized discounted state visitation of the final policy from ρ.
    pub visitation: Vec<f64>,
    /// Not serialized, so reruns produce identical files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub algorithm: Algorithm,
    pub beta: Option<f64>,
    pub seed: u64,
    pub seed_index: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub label: String,
    pub algorithm: Algorithm,
    pub beta: Option<f64>,
    pub completed: usize,
    pub failed: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single run.
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentOutcome {
    /// Successful runs, in task-major then seed order.
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub summaries: Vec<AlgorithmSummary>,
}

/// Mean and sample standard deviation; `(NaN, NaN)` for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn score_policy(config: &ExperimentConfig, game: &MultiAgentTabularGame, policy: &FactoredPolicy) -> Result<f64> {
    let joint = policy.to_joint();
    if config.kind == ExperimentKind::BallBalancing {
        finite_horizon_return(game, &joint, config.ball.episode_length)
    } else {
        Ok(risk_neutral_evaluation(game, &joint)?.start_value(game.rho()))
    }
}

fn greedy_rows(policy: &FactoredPolicy, tables: &[Vec<Vec<f64>>]) -> Result<FactoredPolicy> {
    let mut next = policy.clone();
    for (agent, table) in tables.iter().enumerate() {
        for (s, row) in table.iter().enumerate() {
            let mut one_hot = vec![0.0; row.len()];
            one_hot[argmax(row)] = 1.0;
            next.set_row(agent, s, one_hot)?;
        }
    }
    Ok(next)
}

fn run_exact(
    config: &ExperimentConfig,
    game: &MultiAgentTabularGame,
    algorithm: Algorithm,
    beta: Option<f64>,
) -> Result<LearningOutcome> {
    let step = config.update.eta / (1.0 - game.gamma());
    let mut policy = FactoredPolicy::uniform(game);
    let mut returns = Vec::with_capacity(config.update.outer_iterations);
    for _ in 0..config.update.outer_iterations {
        policy = match (algorithm, beta) {
            (Algorithm::RiskNeutralPg, _) => {
                let values = risk_neutral_evaluation(game, &policy.to_joint())?;
                projected_step(&policy, &risk_neutral_averaged_q(game, &policy, &values), step)?
            }
            (Algorithm::OptimisticPg, Some(b)) => {
                projected_step(&policy, &evaluate(game, &policy, b, GRADIENT_TOLERANCE)?.qbar, step)?
            }
            (Algorithm::OptimisticGreedy, Some(b)) => {
                greedy_rows(&policy, &evaluate(game, &policy, b, GRADIENT_TOLERANCE)?.qbar)?
            }
            _ => return Err(Error::Config(format!("{} has no exact mode", algorithm.name()))),
        };
        returns.push(score_policy(config, game, &policy)?);
    }
    Ok(LearningOutcome { returns, policy })
}

fn run_sampled(
    config: &ExperimentConfig,
    game: &MultiAgentTabularGame,
    algorithm: Algorithm,
    beta: Option<f64>,
    seed: u64,
) -> Result<LearningOutcome> {
    let mut streams = RunStreams::new(seed, 0, game.n_agents());
    let score = |p: &FactoredPolicy| score_policy(config, game, p);
    match (algorithm, beta) {
        (Algorithm::OptimisticPg | Algorithm::OptimisticGreedy, Some(b)) => {
            let update = UpdateConfig {
                mode: if algorithm == Algorithm::OptimisticPg {
                    UpdateMode::Gradient
                } else {
                    UpdateMode::Greedy
                },
                ..config.update.clone()
            };
            let initial = FactoredPolicy::uniform(game);
            optimistic_policy_update_run(game, &initial, b, &config.eval_config(), &update, &mut streams, score)
        }
        (Algorithm::DecentralizedQ, _) => {
            decentralized_q_learning_run(game, &config.baseline, config.baseline_blocks, &mut streams, score)
                .map(|(o, _)| o)
        }
        (Algorithm::HystereticQ, _) => {
            hysteretic_q_learning_run(game, &config.baseline, config.baseline_blocks, &mut streams, score)
                .map(|(o, _)| o)
        }
        _ => Err(Error::Config(format!("{} has no sampled mode", algorithm.name()))),
    }
}

/// Runs one `(algorithm, beta, seed)` task.
pub fn run_single(
    config: &ExperimentConfig,
    algorithm: Algorithm,
    beta: Option<f64>,
    seed: u64,
    seed_index: usize,
) -> Result<RunRecord> {
    let started = Instant::now();
    let game = config.build_game()?;
    let outcome = if config.kind == ExperimentKind::GridworldExact {
        run_exact(config, &game, algorithm, beta)?
    } else {
        run_sampled(config, &game, algorithm, beta, seed)?
    };
    let visitation = visitation_distribution(&game, &outcome.policy.to_joint(), game.rho())?.into_inner();
    let final_return = score_policy(config, &game, &outcome.policy)?;
    // Where and how wide the run executes does not change its result; keep
    // records byte-identical across output directories and thread counts.
    let mut recorded = config.clone();
    recorded.out_dir = None;
    recorded.jobs = None;
    Ok(RunRecord {
        config: recorded,
        algorithm,
        beta,
        seed,
        seed_index,
        returns: outcome.returns,
        final_return,
        final_policy: outcome.policy,
        visitation,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("runs"))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(probe)?;
    Ok(())
}

/// Validates the config, checks the output directory is writable, executes
/// every task for every seed, and writes the output files when `out_dir` is
/// set. Per-seed failures are collected, not fatal.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    if !config.kind.is_run() {
        return Err(Error::Config(
            "run_experiment needs a gridworld or ball_balancing kind".into(),
        ));
    }
    if let Some(dir) = &config.out_dir {
        prepare_out_dir(dir)?;
    }
    let tasks = config.tasks();
    let jobs: Vec<(Algorithm, Option<f64>, u64, usize)> = tasks
        .iter()
        .flat_map(|&(a, b)| config.seeds.iter().enumerate().map(move |(k, &s)| (a, b, s, k)))
        .collect();
    let pool = thread_pool(config.jobs)?;
    let results: Vec<Result<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(a, b, s, k)| {
                log::info!("running {} seed {s}", task_label(a, b));
                run_single(config, a, b, s, k)
            })
            .collect()
    });
    let mut outcome = ExperimentOutcome::default();
    for (&(algorithm, beta, seed, seed_index), result) in jobs.iter().zip(results) {
        match result {
            Ok(record) => outcome.records.push(record),
            Err(e) => {
                log::error!("{} seed {seed} failed: {e}", task_label(algorithm, beta));
                outcome.failures.push(RunFailure {
                    algorithm,
                    beta,
                    seed,
                    seed_index,
                    message: e.to_string(),
                });
            }
        }
    }
    outcome.summaries = summarize(&tasks, &outcome);
    if let Some(dir) = &config.out_dir {
        write_outputs(dir, config, &outcome)?;
    }
    Ok(outcome)
}

fn records_for(outcome: &ExperimentOutcome, algorithm: Algorithm, beta: Option<f64>) -> Vec<&RunRecord> {
    outcome
        .records
        .iter()
        .filter(|r| r.algorithm == algorithm && r.beta == beta)
        .collect()
}

pub fn summarize(tasks: &[(Algorithm, Option<f64>)], outcome: &ExperimentOutcome) -> Vec<AlgorithmSummary> {
    tasks
        .iter()
        .map(|&(algorithm, beta)| {
            let finals: Vec<f64> = records_for(outcome, algorithm, beta)
                .iter()
                .map(|r| r.final_return)
                .collect();
            let (mean, std) = mean_std(&finals);
            AlgorithmSummary {
                label: task_label(algorithm, beta),
                algorithm,
                beta,
                completed: finals.len(),
                failed: outcome
                    .failures
                    .iter()
                    .filter(|f| f.algorithm == algorithm && f.beta == beta)
                    .count(),
                mean,
                std,
            }
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(|b| b.to_string()).unwrap_or_default()
}

pub fn summary_csv(summaries: &[AlgorithmSummary]) -> String {
    let mut out = String::from("algorithm,beta,completed,failed,mean_final_return,std_final_return\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.algorithm.name(),
            opt(s.beta),
            s.completed,
            s.failed,
            s.mean,
            s.std
        );
    }
    out
}

/// Per-iteration mean and a one-standard-deviation band across seeds.
pub fn curves_csv(tasks: &[(Algorithm, Option<f64>)], outcome: &ExperimentOutcome) -> String {
    let mut out = String::from("algorithm,beta,iteration,mean,std,lower,upper\n");
    for &(algorithm, beta) in tasks {
        let records = records_for(outcome, algorithm, beta);
        let len = records.iter().map(|r| r.returns.len()).min().unwrap_or(0);
        for k in 0..len {
            let column: Vec<f64> = records.iter().map(|r| r.returns[k]).collect();
            let (mean, std) = mean_std(&column);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                algorithm.name(),
                opt(beta),
                k + 1,
                mean,
                std,
                mean - std,
                mean + std
            );
        }
    }
    out
}

/// Seed-averaged final visitation on the 4×4 grid; one row per x with
/// columns y = 1..4.
pub fn heatmap_csv(tasks: &[(Algorithm, Option<f64>)], outcome: &ExperimentOutcome) -> String {
    let mut out = String::from("algorithm,beta,x,y1,y2,y3,y4\n");
    for &(algorithm, beta) in tasks {
        let records = records_for(outcome, algorithm, beta);
        if records.is_empty() {
            continue;
        }
        let mut grid = [[0.0; GRID_SIZE]; GRID_SIZE];
        for r in &records {
            for (s, &d) in r.visitation.iter().enumerate() {
                let (x, y) = grid_cell(s);
                grid[x - 1][y - 1] += d / records.len() as f64;
            }
        }
        for (x, row) in grid.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{},{},{},{}", algorithm.name(), opt(beta), x + 1, cells.join(","));
        }
    }
    out
}

/// Run-file names: `<seed>.json`, then `<seed>_1.json`, `<seed>_2.json` for
/// repeats of the same seed.
pub fn run_file_names(seeds: &[u64]) -> Vec<String> {
    let mut names = Vec::with_capacity(seeds.len());
    for (k, seed) in seeds.iter().enumerate() {
        let repeat = seeds[..k].iter().filter(|s| *s == seed).count();
        names.push(if repeat == 0 {
            format!("{seed}.json")
        } else {
            format!("{seed}_{repeat}.json")
        });
    }
    names
}

fn write_outputs(dir: &Path, config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<()> {
    let tasks = config.tasks();
    fs::write(dir.join("summary.csv"), summary_csv(&outcome.summaries))?;
    fs::write(dir.join("curves.csv"), curves_csv(&tasks, outcome))?;
    if config.is_gridworld() {
        fs::write(dir.join("heatmap.csv"), heatmap_csv(&tasks, outcome))?;
    }
    for (k, name) in run_file_names(&config.seeds).iter().enumerate() {
        let file = SeedFile {
            seed: config.seeds[k],
            records: outcome.records.iter().filter(|r| r.seed_index == k).collect(),
            failures: outcome.failures.iter().filter(|f| f.seed_index == k).collect(),
        };
        fs::write(dir.join("runs").join(name), serde_json::to_string_pretty(&file)? + "\n")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SeedFile<'a> {
    seed: u64,
    records: Vec<&'a RunRecord>,
    failures: Vec<&'a RunFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub n_games: usize,
    pub beta: f64,
    pub threshold: f64,
    /// Largest `|fd − exact| / max(|exact|, 1e-8)` over all directions, per
    /// game.
    pub per_game: Vec<f64>,
    pub max_relative_error: f64,
    /// For `β ≤ 1e-3`: largest absolute gap between the tangent parts of
    /// the exact and the classical risk-neutral gradients.
    pub classical_max_error: Option<f64>,
    pub passed: bool,
}

/// Beta at or below which the grad check also compares against the
/// classical gradient.
pub const CLASSICAL_COMPARISON_BETA: f64 = 1e-3;

const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Exact optimistic gradient against central finite differences on random
/// small games and interior policies.
pub fn grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut per_game = Vec::with_capacity(config.n_games);
    let mut classical: Option<f64> = None;
    for g in 0..config.n_games {
        let seed = config.seed + g as u64;
        let n_states = 2 + g % (config.max_states - 1);
        let game = random_game(seed, n_states, &[2, 2], 0.9);
        let policy = random_interior_policy(&game, seed);
        let exact = exact_policy_gradient(&game, &policy, config.beta, game.rho())?;
        let mut worst = 0.0f64;
        for k in 0..config.directions {
            let dir = random_sum_zero_direction(&policy, seed * 1000 + k as u64);
            let e = exact.directional(&dir);
            let fd = finite_difference_gradient(&game, &policy, config.beta, game.rho(), &dir, config.h)?;
            worst = worst.max((fd - e).abs() / e.abs().max(GRAD_CHECK_FLOOR));
        }
        per_game.push(worst);
        if config.beta <= CLASSICAL_COMPARISON_BETA {
            let a = exact.tangent();
            let b = classical_policy_gradient(&game, &policy, game.rho())?.tangent();
            let gap = a
                .per_agent
                .iter()
                .flatten()
                .flatten()
                .zip(b.per_agent.iter().flatten().flatten())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            classical = Some(classical.unwrap_or(0.0).max(gap));
        }
    }
    let max_relative_error = per_game.iter().copied().fold(0.0, f64::max);
    let passed = max_relative_error <= config.threshold && classical.is_none_or(|c| c <= config.threshold);
    Ok(GradCheckReport {
        n_games: config.n_games,
        beta: config.beta,
        threshold: config.threshold,
        per_game,
        max_relative_error,
        classical_max_error: classical,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashCheckReport {
    pub stay_44: NashReport,
    pub transit_22: NashReport,
    /// Stay-at-(4,4) is Nash and strictly worse from ρ than transit-to-(2,2).
    pub passed: bool,
}

/// Certifies the two gridworld equilibria: walking to and staying at (4,4),
/// and the team-optimal policy that transits to (2,2).
pub fn nash_check(gridworld: &GridworldConfig, config: &NashCheckConfig) -> Result<NashCheckReport> {
    let game = build_gridworld(gridworld)?;
    let stay = gridworld_transit_policy(&game, (4, 4), Some((3, 3)))?;
    let transit = optimal_deterministic_policy(&game, 1e-12)?;
    let stay_44 = check_deterministic_nash(&game, &stay, config.tolerance)?;
    let transit_22 = check_deterministic_nash(&game, &transit, config.tolerance)?;
    let passed = stay_44.is_nash && stay_44.start_value < transit_22.start_value;
    Ok(NashCheckReport {
        stay_44,
        transit_22,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityCheckReport {
    pub n_games: usize,
    pub beta: f64,
    pub resolution: usize,
    /// Largest `|V(s) − (E_{π̂}Q − β⁻¹KL(π̂‖π))|` at the tilted policy.
    pub max_dual_gap: f64,
    /// Largest amount by which any grid point's penalized objective exceeds
    /// `V(s)`.
    pub max_grid_excess: f64,
    pub passed: bool,
}

/// Per-state Fenchel check on converged evaluations of random games: the
/// tilt attains `V(s)` and no simplex-grid point beats it.
pub fn duality_check_command(config: &DualityCheckConfig) -> Result<DualityCheckReport> {
    let params = RiskParams::new(config.beta)?;
    let n_joint: usize = config.action_counts.iter().product();
    let grid = simplex_grid(n_joint, config.resolution);
    let mut max_dual_gap = 0.0f64;
    let mut max_grid_excess = f64::NEG_INFINITY;
    for g in 0..config.n_games {
        let seed = config.seed + g as u64;
        let game = random_game(seed, config.n_states, &config.action_counts, 0.9);
        let policy = random_interior_policy(&game, seed);
        let eval = evaluate(&game, &policy, config.beta, 1e-12)?;
        let joint = policy.to_joint();
        for s in 0..game.n_states() {
            let pi = Distribution::new(joint.row(s).to_vec())?;
            let report = duality_check(&pi, &eval.q[s], params, &grid)?;
            let tilt_objective = report.tilt_gap + crate::risk::soft_value(&pi, &eval.q[s], params)?;
            max_dual_gap = max_dual_gap.max((eval.v[s] - tilt_objective).abs());
            max_grid_excess = max_grid_excess.max(report.max_gap);
        }
    }
    let passed = max_dual_gap <= config.tolerance && max_grid_excess <= 1.0 / config.resolution as f64;
    Ok(DualityCheckReport {
        n_games: config.n_games,
        beta: config.beta,
        resolution: config.resolution,
        max_dual_gap,
        max_grid_excess,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactEvaluationSummary {
    pub beta: f64,
    /// Optimistic `E_{s∼ρ} V_β(s)` of the uniform policy.
    pub start_value: f64,
    /// Risk-neutral `E_{s∼ρ} V⁰(s)` of the same policy.
    pub risk_neutral_start_value: f64,
    pub residual: f64,
    pub iterations: usize,
    pub v: Vec<f64>,
    pub qbar: Vec<Vec<Vec<f64>>>,
}

/// Exact optimistic evaluation of the uniform policy on the configured
/// environment, once per configured beta.
pub fn eval_exact(config: &ExperimentConfig) -> Result<Vec<ExactEvaluationSummary>> {
    if config.betas.is_empty() {
        return Err(Error::Config("eval-exact needs at least one beta".into()));
    }
    for &b in &config.betas {
        positive("beta", b)?;
    }
    let game = config.build_game()?;
    let policy = FactoredPolicy::uniform(&game);
    let neutral = risk_neutral_evaluation(&game, &policy.to_joint())?.start_value(game.rho());
    config
        .betas
        .iter()
        .map(|&beta| {
            let eval = evaluate(&game, &policy, beta, 1e-10)?;
            Ok(ExactEvaluationSummary {
                beta,
                start_value: eval.start_value(game.rho()),
                risk_neutral_start_value: neutral,
                residual: eval.residual,
                iterations: eval.iterations,
                v: eval.v,
                qbar: eval.qbar,
            })
        })
        .collect()
}
