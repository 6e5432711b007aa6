//! Sample-based decentralized learners: optimistic policy evaluation from a
//! single trajectory, the optimistic policy-update loop built on it, and the
//! independent and hysteretic Q-learning baselines.
//!
//! Every agent owns its tables and sees only the shared state, its own
//! action and the common reward. One coordinator advances the environment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{sample_step, FactoredPolicy, MultiAgentTabularGame};
use crate::optimistic::project_to_simplex;
use crate::rng::{Purpose, RngStream, StreamId};

/// Stepsize sequence for the stochastic-approximation updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSize {
    Constant {
        alpha: f64,
    },
    /// `α_t = α₀ τ / (τ + t)`.
    Diminishing {
        alpha0: f64,
        tau: f64,
    },
}

impl Default for StepSize {
    fn default() -> Self {
        StepSize::Diminishing { alpha0: 0.5, tau: 1e4 }
    }
}

impl StepSize {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            StepSize::Constant { alpha } => alpha,
            StepSize::Diminishing { alpha0, tau } => alpha0 * tau / (tau + t as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSize::Constant { alpha } => alpha > 0.0 && alpha <= 1.0,
            StepSize::Diminishing { alpha0, tau } => alpha0 > 0.0 && alpha0 <= 1.0 && tau > 0.0 && tau.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("stepsize {self:?} must lie in (0, 1]")))
        }
    }
}

/// Linear anneal from `start` to `end` across the outer iterations (or
/// episodes) of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 0.3, end: 0.01 }
    }
}

impl EpsilonSchedule {
    pub fn constant(epsilon: f64) -> Self {
        Self {
            start: epsilon,
            end: epsilon,
        }
    }

    pub fn at(&self, k: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.start;
        }
        let frac = k as f64 / (total - 1) as f64;
        self.start + (self.end - self.start) * frac.min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for e in [self.start, self.end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("epsilon {e} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Environment steps per evaluation.
    pub t_q: u64,
    pub step_size: StepSize,
    /// Scale the Z-update by β so that its fixed point is `e^{βV}`. When
    /// false the printed recursion is used, whose fixed point is
    /// `β^{-1/(1-γ)} e^{βV}`.
    pub consistent_z: bool,
    /// Redraw the state from ρ every this many steps.
    pub reset_period: Option<u64>,
    /// Refuse stochastic transitions instead of warning.
    pub strict: bool,
    /// Index the stepsize by the visit count of the updated entry instead
    /// of the global step count.
    pub per_visit_steps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            t_q: 100_000,
            step_size: StepSize::default(),
            consistent_z: true,
            reset_period: None,
            strict: false,
            per_visit_steps: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.step_size.validate()?;
        if self.reset_period == Some(0) {
            return Err(Error::Config("reset_period must be positive".into()));
        }
        Ok(())
    }
}

/// Tables one agent keeps while evaluating a fixed joint behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentLearnerState {
    pub agent: usize,
    /// Averaged optimistic Q estimate, `[s][a_i]`.
    pub qbar: Vec<Vec<f64>>,
    /// Estimate of `e^{βV}`, one entry per state.
    pub z: Vec<f64>,
    pub visits: Vec<Vec<u64>>,
    pub beta: f64,
    pub gamma: f64,
    pub step_count: u64,
    pub step_size: StepSize,
    pub consistent_z: bool,
    pub per_visit_steps: bool,
}

impl AgentLearnerState {
    pub fn new(game: &MultiAgentTabularGame, agent: usize, beta: f64, config: &EvalConfig) -> Self {
        let n = game.action_counts()[agent];
        Self {
            agent,
            qbar: vec![vec![0.0; n]; game.n_states()],
            z: vec![1.0; game.n_states()],
            visits: vec![vec![0; n]; game.n_states()],
            beta,
            gamma: game.gamma(),
            step_count: 0,
            step_size: config.step_size,
            consistent_z: config.consistent_z,
            per_visit_steps: config.per_visit_steps,
        }
    }

    /// One transition `(s, a_i, r, s')` observed by this agent.
    pub fn update(&mut self, state: usize, action: usize, reward: f64, next: usize) -> Result<()> {
        let (alpha_q, alpha_z) = if self.per_visit_steps {
            (
                self.step_size.at(self.visits[state][action]),
                self.step_size.at(self.state_visits(state)),
            )
        } else {
            let alpha = self.step_size.at(self.step_count);
            (alpha, alpha)
        };
        let target = (self.beta * reward).exp() * self.z[next].powf(self.gamma) / self.beta;
        let q = &mut self.qbar[state][action];
        *q = (1.0 - alpha_q) * *q + alpha_q * target;
        let scale = if self.consistent_z { self.beta } else { 1.0 };
        let z = (1.0 - alpha_z) * self.z[state] + alpha_z * scale * *q;
        if !(z.is_finite() && z > 0.0 && q.is_finite()) {
            return Err(Error::NonFinite("optimistic evaluation tables"));
        }
        self.z[state] = z;
        self.visits[state][action] += 1;
        self.step_count += 1;
        Ok(())
    }

    pub fn state_visits(&self, state: usize) -> u64 {
        self.visits[state].iter().sum()
    }
}

/// Environment and per-agent streams for one run.
#[derive(Clone, Debug)]
pub struct RunStreams {
    pub environment: RngStream,
    pub actions: Vec<RngStream>,
    pub exploration: Vec<RngStream>,
}

impl RunStreams {
    pub fn new(seed: u64, run: u32, n_agents: usize) -> Self {
        let agent_stream = |agent: usize, purpose| RngStream::new(seed, StreamId::new(run, agent as u16, purpose));
        Self {
            environment: RngStream::new(seed, StreamId::new(run, u16::MAX, Purpose::Environment)),
            actions: (0..n_agents).map(|i| agent_stream(i, Purpose::Action)).collect(),
            exploration: (0..n_agents).map(|i| agent_stream(i, Purpose::Exploration)).collect(),
        }
    }
}

fn check_scope(game: &MultiAgentTabularGame, strict: bool) -> Result<()> {
    if game.is_deterministic() {
        return Ok(());
    }
    if strict {
        return Err(Error::Scope(
            "decentralized optimistic evaluation assumes deterministic transitions".into(),
        ));
    }
    log::warn!("optimistic evaluation on stochastic transitions; the learned tables are biased");
    Ok(())
}

/// Runs `config.t_q` synchronous steps with every agent acting from
/// `behavior` and returns each agent's learned tables.
pub fn optimistic_evaluation_run(
    game: &MultiAgentTabularGame,
    behavior: &FactoredPolicy,
    beta: f64,
    config: &EvalConfig,
    streams: &mut RunStreams,
) -> Result<Vec<AgentLearnerState>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let mut learners: Vec<AgentLearnerState> = (0..game.n_agents())
        .map(|i| AgentLearnerState::new(game, i, beta, config))
        .collect();
    continue_evaluation(game, behavior, &mut learners, config, streams)?;
    Ok(learners)
}

/// Same as [`optimistic_evaluation_run`] but keeps updating existing tables,
/// including their step counts.
pub fn continue_evaluation(
    game: &MultiAgentTabularGame,
    behavior: &FactoredPolicy,
    learners: &mut [AgentLearnerState],
    config: &EvalConfig,
    streams: &mut RunStreams,
) -> Result<()> {
    behavior.check_against(game)?;
    config.validate()?;
    check_scope(game, config.strict)?;
    if learners.len() != game.n_agents() {
        return Err(Error::Dimension {
            expected: game.n_agents(),
            found: learners.len(),
        });
    }
    let mut actions = vec![0; game.n_agents()];
    let mut state = streams.environment.categorical(game.rho().weights());
    for t in 0..config.t_q {
        if let Some(period) = config.reset_period {
            if t > 0 && t % period == 0 {
                state = streams.environment.categorical(game.rho().weights());
            }
        }
        for (i, a) in actions.iter_mut().enumerate() {
            *a = streams.actions[i].categorical(behavior.row(i, state));
        }
        let joint = game.encode_joint(&actions)?;
        let (next, reward) = sample_step(game, state, joint, &mut streams.environment)?;
        for (learner, &a) in learners.iter_mut().zip(&actions) {
            learner.update(state, a, reward, next)?;
        }
        state = next;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Projected ascent along the learned averaged optimistic Q.
    #[default]
    Gradient,
    /// Deterministic argmax of the learned table, ties to the lowest index.
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateConfig {
    pub mode: UpdateMode,
    pub eta: f64,
    pub outer_iterations: usize,
    /// Uniform mixing in the behavior policy during each evaluation.
    pub epsilon: EpsilonSchedule,
    /// Keep the learned tables across outer iterations instead of starting
    /// every evaluation from `Q̄ = 0, Z = 1`.
    pub warm_start: bool,
    /// Rows of states an agent visited fewer times than this are left
    /// unchanged by an improvement.
    pub min_visits: u64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            mode: UpdateMode::Gradient,
            eta: 0.1,
            outer_iterations: 50,
            epsilon: EpsilonSchedule::default(),
            warm_start: false,
            min_visits: 1,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        self.epsilon.validate()
    }
}

/// What a learning run produces: one score per outer iteration (or block)
/// and the final policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningOutcome {
    pub returns: Vec<f64>,
    pub policy: FactoredPolicy,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut row = vec![0.0; n];
    row[k] = 1.0;
    row
}

/// Applies one improvement step to `policy` from the learned tables. States
/// an agent visited fewer than `min_visits` times (at least once) keep their
/// current row.
pub fn improve_policy(
    policy: &FactoredPolicy,
    learners: &[AgentLearnerState],
    mode: UpdateMode,
    step: f64,
    min_visits: u64,
) -> Result<FactoredPolicy> {
    let mut next = policy.clone();
    for learner in learners {
        let i = learner.agent;
        for (s, q) in learner.qbar.iter().enumerate() {
            if learner.state_visits(s) < min_visits.max(1) {
                continue;
            }
            let row = match mode {
                UpdateMode::Greedy => one_hot(q.len(), argmax(q)),
                UpdateMode::Gradient => {
                    let moved: Vec<f64> = policy.row(i, s).iter().zip(q).map(|(p, g)| p + step * g).collect();
                    project_to_simplex(&moved)?.into_inner()
                }
            };
            next.set_row(i, s, row)?;
        }
    }
    Ok(next)
}

/// Alternates sampled optimistic evaluation of the ε-mixed behavior policy
/// with a policy improvement, `outer_iterations` times. `score` is called on
/// the policy after every improvement.
pub fn optimistic_policy_update_run(
    game: &MultiAgentTabularGame,
    initial: &FactoredPolicy,
    beta: f64,
    eval_config: &EvalConfig,
    update_config: &UpdateConfig,
    streams: &mut RunStreams,
    mut score: impl FnMut(&FactoredPolicy) -> Result<f64>,
) -> Result<LearningOutcome> {
    update_config.validate()?;
    eval_config.validate()?;
    let step = update_config.eta / (1.0 - game.gamma());
    let mut policy = initial.clone();
    let mut returns = Vec::with_capacity(update_config.outer_iterations);
    let mut learners: Vec<AgentLearnerState> = Vec::new();
    for k in 0..update_config.outer_iterations {
        let eps = update_config.epsilon.at(k, update_config.outer_iterations);
        let behavior = policy.mix_uniform(eps);
        if update_config.warm_start && !learners.is_empty() {
            continue_evaluation(game, &behavior, &mut learners, eval_config, streams)?;
        } else {
            learners = optimistic_evaluation_run(game, &behavior, beta, eval_config, streams)?;
        }
        policy = improve_policy(&policy, &learners, update_config.mode, step, update_config.min_visits)?;
        returns.push(score(&policy)?);
    }
    Ok(LearningOutcome { returns, policy })
}

/// Settings shared by the two Q-learning baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub alpha_up: f64,
    /// Rate for negative TD errors; equal to `alpha_up` for plain
    /// decentralized Q-learning.
    pub alpha_down: f64,
    pub epsilon: EpsilonSchedule,
    pub episode_length: u64,
    /// Score the greedy policy after every block of this many episodes.
    pub episodes_per_block: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            alpha_up: 0.1,
            alpha_down: 0.01,
            epsilon: EpsilonSchedule::default(),
            episode_length: 200,
            episodes_per_block: 10,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_up > 0.0 && self.alpha_up <= 1.0) {
            return Err(Error::Config(format!("alpha_up {} outside (0, 1]", self.alpha_up)));
        }
        if !(self.alpha_down >= 0.0 && self.alpha_down <= self.alpha_up) {
            return Err(Error::Config(format!(
                "alpha_down {} must lie in [0, alpha_up = {}]",
                self.alpha_down, self.alpha_up
            )));
        }
        if self.episode_length == 0 || self.episodes_per_block == 0 {
            return Err(Error::Config(
                "episode_length and episodes_per_block must be positive".into(),
            ));
        }
        self.epsilon.validate()
    }
}

/// Per-agent Q tables of an independent learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    /// `[agent][s][a_i]`.
    pub q: Vec<Vec<Vec<f64>>>,
    pub alpha_up: f64,
    pub alpha_down: f64,
}

impl BaselineState {
    pub fn new(game: &MultiAgentTabularGame, config: &BaselineConfig) -> Self {
        Self {
            q: game
                .action_counts()
                .iter()
                .map(|&n| vec![vec![0.0; n]; game.n_states()])
                .collect(),
            alpha_up: config.alpha_up,
            alpha_down: config.alpha_down,
        }
    }

    /// Hysteretic TD update for one agent; returns the TD error.
    pub fn update(&mut self, agent: usize, gamma: f64, state: usize, action: usize, reward: f64, next: usize) -> f64 {
        let table = &mut self.q[agent];
        let best_next = table[next].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let delta = reward + gamma * best_next - table[state][action];
        let rate = if delta >= 0.0 { self.alpha_up } else { self.alpha_down };
        table[state][action] += rate * delta;
        delta
    }

    pub fn greedy_policy(&self, game: &MultiAgentTabularGame) -> Result<FactoredPolicy> {
        let choices: Vec<Vec<usize>> = self
            .q
            .iter()
            .map(|t| t.iter().map(|row| argmax(row)).collect())
            .collect();
        FactoredPolicy::deterministic(game, &choices)
    }
}

/// Independent ε-greedy Q-learning with separate rates for positive and
/// negative TD errors. Runs `blocks × episodes_per_block` episodes and
/// scores the greedy policy after each block.
pub fn hysteretic_q_learning_run(
    game: &MultiAgentTabularGame,
    config: &BaselineConfig,
    blocks: usize,
    streams: &mut RunStreams,
    mut score: impl FnMut(&FactoredPolicy) -> Result<f64>,
) -> Result<(LearningOutcome, BaselineState)> {
    config.validate()?;
    let mut state_q = BaselineState::new(game, config);
    let n_agents = game.n_agents();
    let total_episodes = blocks * config.episodes_per_block;
    let mut actions = vec![0; n_agents];
    let mut returns = Vec::with_capacity(blocks);
    for episode in 0..total_episodes {
        let eps = config.epsilon.at(episode, total_episodes);
        let mut state = streams.environment.categorical(game.rho().weights());
        for _ in 0..config.episode_length {
            for (i, a) in actions.iter_mut().enumerate() {
                *a = if streams.exploration[i].uniform() < eps {
                    streams.actions[i].below(game.action_counts()[i])
                } else {
                    argmax(&state_q.q[i][state])
                };
            }
            let joint = game.encode_joint(&actions)?;
            let (next, reward) = sample_step(game, state, joint, &mut streams.environment)?;
            for (i, &a) in actions.iter().enumerate() {
                state_q.update(i, game.gamma(), state, a, reward, next);
            }
            state = next;
        }
        if (episode + 1) % config.episodes_per_block == 0 {
            returns.push(score(&state_q.greedy_policy(game)?)?);
        }
    }
    let policy = state_q.greedy_policy(game)?;
    Ok((LearningOutcome { returns, policy }, state_q))
}

/// Plain independent Q-learning: the hysteretic learner with
/// `alpha_down = alpha_up`.
pub fn decentralized_q_learning_run(
    game: &MultiAgentTabularGame,
    config: &BaselineConfig,
    blocks: usize,
    streams: &mut RunStreams,
    score: impl FnMut(&FactoredPolicy) -> Result<f64>,
) -> Result<(LearningOutcome, BaselineState)> {
    let plain = BaselineConfig {
        alpha_down: config.alpha_up,
        ..config.clone()
    };
    hysteretic_q_learning_run(game, &plain, blocks, streams, score)
}
