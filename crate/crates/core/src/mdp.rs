//! Tabular multi-agent MDPs, product and joint policies, visitation
//! distributions, risk-neutral evaluation and environment sampling.
//!
//! Joint actions are flattened row-major with agent 0 as the most significant
//! digit: for action counts `[n0, n1, n2]` the joint index of `(a0, a1, a2)`
//! is `(a0 * n1 + a1) * n2 + a2`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::Distribution;
use crate::rng::RngStream;

/// State-space size above which visitation and evaluation solves switch from
/// a dense LU factorization to fixed-point iteration.
pub const DIRECT_SOLVE_MAX_STATES: usize = 2000;

/// Tolerance on transition-row and initial-distribution normalization.
pub const KERNEL_TOLERANCE: f64 = 1e-12;

/// Tolerance on policy-row normalization.
pub const POLICY_TOLERANCE: f64 = 1e-10;

const ITERATIVE_TOLERANCE: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transitions {
    /// `P[s][joint][s']`.
    Dense(Vec<Vec<Vec<f64>>>),
    /// `f[s][joint]`, the unique successor.
    Deterministic(Vec<Vec<usize>>),
}

/// On-disk layout of a game; also the validation entry point.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSpec {
    pub n_agents: usize,
    pub n_states: usize,
    pub action_counts: Vec<usize>,
    pub transition: Transitions,
    /// `r[s][joint]`.
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub rho: Vec<f64>,
}

/// A finite cooperative game with identical rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GameSpec", into = "GameSpec")]
pub struct MultiAgentTabularGame {
    n_states: usize,
    action_counts: Vec<usize>,
    transition: Transitions,
    reward: Vec<Vec<f64>>,
    gamma: f64,
    rho: Distribution,
    joint_actions: Vec<Vec<usize>>,
}

impl TryFrom<GameSpec> for MultiAgentTabularGame {
    type Error = Error;

    fn try_from(spec: GameSpec) -> Result<Self> {
        if spec.n_agents == 0 || spec.action_counts.len() != spec.n_agents {
            return Err(Error::Dimension {
                expected: spec.n_agents,
                found: spec.action_counts.len(),
            });
        }
        MultiAgentTabularGame::new(spec.action_counts, spec.transition, spec.reward, spec.gamma, spec.rho).and_then(
            |g| {
                if g.n_states != spec.n_states {
                    Err(Error::Dimension {
                        expected: spec.n_states,
                        found: g.n_states,
                    })
                } else {
                    Ok(g)
                }
            },
        )
    }
}

impl From<MultiAgentTabularGame> for GameSpec {
    fn from(g: MultiAgentTabularGame) -> Self {
        GameSpec {
            n_agents: g.action_counts.len(),
            n_states: g.n_states,
            action_counts: g.action_counts,
            transition: g.transition,
            reward: g.reward,
            gamma: g.gamma,
            rho: g.rho.into_inner(),
        }
    }
}

fn enumerate_joint(action_counts: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = action_counts.iter().product();
    (0..total)
        .map(|mut j| {
            let mut digits = vec![0; action_counts.len()];
            for (slot, &n) in digits.iter_mut().zip(action_counts).rev() {
                *slot = j % n;
                j /= n;
            }
            digits
        })
        .collect()
}

impl MultiAgentTabularGame {
    pub fn new(
        action_counts: Vec<usize>,
        transition: Transitions,
        reward: Vec<Vec<f64>>,
        gamma: f64,
        rho: Vec<f64>,
    ) -> Result<Self> {
        if action_counts.is_empty() || action_counts.contains(&0) {
            return Err(Error::InvalidParameter("every agent needs at least one action".into()));
        }
        let n_joint = action_counts
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| Error::InvalidParameter("joint action space too large".into()))?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in [0, 1), got {gamma}"
            )));
        }
        let n_states = reward.len();
        if n_states == 0 {
            return Err(Error::InvalidParameter("game has no states".into()));
        }
        for row in &reward {
            if row.len() != n_joint {
                return Err(Error::Dimension {
                    expected: n_joint,
                    found: row.len(),
                });
            }
            if row.iter().any(|r| !r.is_finite()) {
                return Err(Error::NonFinite("reward"));
            }
        }
        match &transition {
            Transitions::Dense(p) => {
                if p.len() != n_states {
                    return Err(Error::Dimension {
                        expected: n_states,
                        found: p.len(),
                    });
                }
                for (s, rows) in p.iter().enumerate() {
                    if rows.len() != n_joint {
                        return Err(Error::Dimension {
                            expected: n_joint,
                            found: rows.len(),
                        });
                    }
                    for (a, row) in rows.iter().enumerate() {
                        if row.len() != n_states {
                            return Err(Error::Dimension {
                                expected: n_states,
                                found: row.len(),
                            });
                        }
                        if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                            return Err(Error::InvalidDistribution(format!(
                                "transition row ({s}, {a}) has invalid entries"
                            )));
                        }
                        let total: f64 = row.iter().sum();
                        if (total - 1.0).abs() > KERNEL_TOLERANCE {
                            return Err(Error::InvalidDistribution(format!(
                                "transition row ({s}, {a}) sums to {total}"
                            )));
                        }
                    }
                }
            }
            Transitions::Deterministic(f) => {
                if f.len() != n_states {
                    return Err(Error::Dimension {
                        expected: n_states,
                        found: f.len(),
                    });
                }
                for row in f {
                    if row.len() != n_joint {
                        return Err(Error::Dimension {
                            expected: n_joint,
                            found: row.len(),
                        });
                    }
                    if let Some(&bad) = row.iter().find(|&&t| t >= n_states) {
                        return Err(Error::Index {
                            what: "next state",
                            index: bad,
                            limit: n_states,
                        });
                    }
                }
            }
        }
        if rho.len() != n_states {
            return Err(Error::Dimension {
                expected: n_states,
                found: rho.len(),
            });
        }
        let rho = Distribution::with_tolerance(rho, KERNEL_TOLERANCE)?;
        let joint_actions = enumerate_joint(&action_counts);
        Ok(Self {
            n_states,
            action_counts,
            transition,
            reward,
            gamma,
            rho,
            joint_actions,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn n_joint(&self) -> usize {
        self.joint_actions.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho(&self) -> &Distribution {
        &self.rho
    }

    pub fn transitions(&self) -> &Transitions {
        &self.transition
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.transition, Transitions::Deterministic(_))
    }

    pub fn reward(&self, state: usize, joint: usize) -> f64 {
        self.reward[state][joint]
    }

    pub fn reward_row(&self, state: usize) -> &[f64] {
        &self.reward[state]
    }

    /// Per-agent actions of a flattened joint action.
    pub fn decode_joint(&self, joint: usize) -> &[usize] {
        &self.joint_actions[joint]
    }

    pub fn encode_joint(&self, actions: &[usize]) -> Result<usize> {
        if actions.len() != self.n_agents() {
            return Err(Error::Dimension {
                expected: self.n_agents(),
                found: actions.len(),
            });
        }
        let mut j = 0;
        for (&a, &n) in actions.iter().zip(&self.action_counts) {
            if a >= n {
                return Err(Error::Index {
                    what: "agent action",
                    index: a,
                    limit: n,
                });
            }
            j = j * n + a;
        }
        Ok(j)
    }

    /// Replaces the initial distribution.
    pub fn with_rho(mut self, rho: Distribution) -> Result<Self> {
        if rho.len() != self.n_states {
            return Err(Error::Dimension {
                expected: self.n_states,
                found: rho.len(),
            });
        }
        self.rho = rho;
        Ok(self)
    }

    /// Calls `visit(next, prob)` for every successor with positive probability.
    pub fn for_each_successor(&self, state: usize, joint: usize, mut visit: impl FnMut(usize, f64)) {
        match &self.transition {
            Transitions::Dense(p) => {
                for (next, &prob) in p[state][joint].iter().enumerate() {
                    if prob > 0.0 {
                        visit(next, prob);
                    }
                }
            }
            Transitions::Deterministic(f) => visit(f[state][joint], 1.0),
        }
    }

    /// `Σ_{s'} P(s'|s,a) values(s')`.
    pub fn expected_next(&self, state: usize, joint: usize, values: &[f64]) -> f64 {
        match &self.transition {
            Transitions::Dense(p) => p[state][joint].iter().zip(values).map(|(p, v)| p * v).sum(),
            Transitions::Deterministic(f) => values[f[state][joint]],
        }
    }

    pub fn next_state(&self, state: usize, joint: usize) -> Option<usize> {
        match &self.transition {
            Transitions::Deterministic(f) => Some(f[state][joint]),
            Transitions::Dense(_) => None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// Independent per-agent tabular policies, `θ_i[s][a_i] = π_i(a_i|s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Vec<f64>>>", into = "Vec<Vec<Vec<f64>>>")]
pub struct FactoredPolicy {
    tables: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<Vec<Vec<Vec<f64>>>> for FactoredPolicy {
    type Error = Error;

    fn try_from(tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        Self::from_tables(tables)
    }
}

impl From<FactoredPolicy> for Vec<Vec<Vec<f64>>> {
    fn from(p: FactoredPolicy) -> Self {
        p.tables
    }
}

fn check_row(row: &[f64]) -> Result<()> {
    if row.is_empty() || row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "policy row {row:?} has invalid entries"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > POLICY_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("policy row sums to {total}")));
    }
    Ok(())
}

impl FactoredPolicy {
    /// Validates `tables[agent][state][action]`.
    pub fn from_tables(tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if tables.is_empty() {
            return Err(Error::InvalidParameter("policy has no agents".into()));
        }
        let n_states = tables[0].len();
        for table in &tables {
            if table.len() != n_states {
                return Err(Error::Dimension {
                    expected: n_states,
                    found: table.len(),
                });
            }
            let n_actions = table.first().map_or(0, Vec::len);
            for row in table {
                if row.len() != n_actions {
                    return Err(Error::Dimension {
                        expected: n_actions,
                        found: row.len(),
                    });
                }
                check_row(row)?;
            }
        }
        Ok(Self { tables })
    }

    pub fn uniform(game: &MultiAgentTabularGame) -> Self {
        let tables = game
            .action_counts()
            .iter()
            .map(|&n| vec![vec![1.0 / n as f64; n]; game.n_states()])
            .collect();
        Self { tables }
    }

    /// Deterministic policy from `choices[agent][state]`.
    pub fn deterministic(game: &MultiAgentTabularGame, choices: &[Vec<usize>]) -> Result<Self> {
        if choices.len() != game.n_agents() {
            return Err(Error::Dimension {
                expected: game.n_agents(),
                found: choices.len(),
            });
        }
        let mut tables = Vec::with_capacity(choices.len());
        for (agent, picks) in choices.iter().enumerate() {
            let n = game.action_counts()[agent];
            if picks.len() != game.n_states() {
                return Err(Error::Dimension {
                    expected: game.n_states(),
                    found: picks.len(),
                });
            }
            let mut table = Vec::with_capacity(picks.len());
            for &a in picks {
                if a >= n {
                    return Err(Error::Index {
                        what: "agent action",
                        index: a,
                        limit: n,
                    });
                }
                let mut row = vec![0.0; n];
                row[a] = 1.0;
                table.push(row);
            }
            tables.push(table);
        }
        Ok(Self { tables })
    }

    /// Fails unless agent count, state count and action counts match `game`.
    pub fn check_against(&self, game: &MultiAgentTabularGame) -> Result<()> {
        if self.tables.len() != game.n_agents() {
            return Err(Error::Dimension {
                expected: game.n_agents(),
                found: self.tables.len(),
            });
        }
        for (table, &n) in self.tables.iter().zip(game.action_counts()) {
            if table.len() != game.n_states() {
                return Err(Error::Dimension {
                    expected: game.n_states(),
                    found: table.len(),
                });
            }
            if table[0].len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: table[0].len(),
                });
            }
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.tables.len()
    }

    pub fn n_states(&self) -> usize {
        self.tables[0].len()
    }

    pub fn n_actions(&self, agent: usize) -> usize {
        self.tables[agent][0].len()
    }

    pub fn row(&self, agent: usize, state: usize) -> &[f64] {
        &self.tables[agent][state]
    }

    pub fn table(&self, agent: usize) -> &[Vec<f64>] {
        &self.tables[agent]
    }

    pub fn tables(&self) -> &[Vec<Vec<f64>>] {
        &self.tables
    }

    /// Overwrites one row; the row must be a distribution of the right size.
    pub fn set_row(&mut self, agent: usize, state: usize, row: Vec<f64>) -> Result<()> {
        if row.len() != self.n_actions(agent) {
            return Err(Error::Dimension {
                expected: self.n_actions(agent),
                found: row.len(),
            });
        }
        check_row(&row)?;
        self.tables[agent][state] = row;
        Ok(())
    }

    /// Probability of a flattened joint action at `state`.
    pub fn joint_prob(&self, game: &MultiAgentTabularGame, state: usize, joint: usize) -> f64 {
        game.decode_joint(joint)
            .iter()
            .enumerate()
            .map(|(i, &a)| self.tables[i][state][a])
            .product()
    }

    /// Probability of `a_{-i}` (the other agents' part of `joint`).
    pub fn others_prob(&self, game: &MultiAgentTabularGame, state: usize, joint: usize, agent: usize) -> f64 {
        game.decode_joint(joint)
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != agent)
            .map(|(i, &a)| self.tables[i][state][a])
            .product()
    }

    pub fn is_deterministic(&self) -> bool {
        self.tables
            .iter()
            .flatten()
            .all(|row| row.iter().all(|&p| p == 0.0 || p == 1.0))
    }

    pub fn is_interior(&self) -> bool {
        self.tables.iter().flatten().flatten().all(|&p| p > 0.0)
    }

    /// The action a deterministic row selects.
    pub fn deterministic_action(&self, agent: usize, state: usize) -> Option<usize> {
        let row = &self.tables[agent][state];
        let mut found = None;
        for (a, &p) in row.iter().enumerate() {
            if p == 1.0 && found.is_none() {
                found = Some(a);
            } else if p != 0.0 {
                return None;
            }
        }
        found
    }

    /// `(1 − ε)·π + ε·uniform`, row by row.
    pub fn mix_uniform(&self, epsilon: f64) -> Self {
        let tables = self
            .tables
            .iter()
            .map(|table| {
                table
                    .iter()
                    .map(|row| {
                        let u = epsilon / row.len() as f64;
                        row.iter().map(|p| (1.0 - epsilon) * p + u).collect()
                    })
                    .collect()
            })
            .collect();
        Self { tables }
    }

    pub fn to_joint(&self) -> JointPolicy {
        let counts: Vec<usize> = (0..self.n_agents()).map(|i| self.n_actions(i)).collect();
        let joint_actions = enumerate_joint(&counts);
        let probs = (0..self.n_states())
            .map(|s| {
                joint_actions
                    .iter()
                    .map(|digits| digits.iter().enumerate().map(|(i, &a)| self.tables[i][s][a]).product())
                    .collect()
            })
            .collect();
        JointPolicy { probs }
    }
}

/// `π[s][joint]`; need not factorize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    probs: Vec<Vec<f64>>,
}

impl JointPolicy {
    pub fn from_rows(probs: Vec<Vec<f64>>) -> Result<Self> {
        for row in &probs {
            check_row(row)?;
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_raw(probs: Vec<Vec<f64>>) -> Self {
        Self { probs }
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    /// Marginal of one agent's action under the joint distribution.
    pub fn marginal(&self, game: &MultiAgentTabularGame, agent: usize) -> Vec<Vec<f64>> {
        self.probs
            .iter()
            .map(|row| {
                let mut m = vec![0.0; game.action_counts()[agent]];
                for (j, &p) in row.iter().enumerate() {
                    m[game.decode_joint(j)[agent]] += p;
                }
                m
            })
            .collect()
    }

    fn check_against(&self, game: &MultiAgentTabularGame) -> Result<()> {
        if self.probs.len() != game.n_states() {
            return Err(Error::Dimension {
                expected: game.n_states(),
                found: self.probs.len(),
            });
        }
        if let Some(row) = self.probs.iter().find(|r| r.len() != game.n_joint()) {
            return Err(Error::Dimension {
                expected: game.n_joint(),
                found: row.len(),
            });
        }
        Ok(())
    }
}

/// Product of the per-agent policies, flattened per the module ordering.
pub fn joint_from_factored(policy: &FactoredPolicy) -> JointPolicy {
    policy.to_joint()
}

/// State-to-state kernel `P_π[s][s']` and expected reward `r_π[s]`.
fn policy_kernel(game: &MultiAgentTabularGame, joint: &JointPolicy) -> (DMatrix<f64>, DVector<f64>) {
    let n = game.n_states();
    let mut p = DMatrix::zeros(n, n);
    let mut r = DVector::zeros(n);
    for s in 0..n {
        for (a, &w) in joint.row(s).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            r[s] += w * game.reward(s, a);
            game.for_each_successor(s, a, |next, prob| p[(s, next)] += w * prob);
        }
    }
    (p, r)
}

/// Discounted state-visitation distribution
/// `d = (1 − γ) Σ_t γ^t Pr(s_t = ·)` with `s_0 ∼ start`.
pub fn visitation_distribution(
    game: &MultiAgentTabularGame,
    joint: &JointPolicy,
    start: &Distribution,
) -> Result<Distribution> {
    joint.check_against(game)?;
    if start.len() != game.n_states() {
        return Err(Error::Dimension {
            expected: game.n_states(),
            found: start.len(),
        });
    }
    let n = game.n_states();
    let gamma = game.gamma();
    let mut d = if n <= DIRECT_SOLVE_MAX_STATES {
        let (p, _) = policy_kernel(game, joint);
        // (I − γ Pᵀ) d = (1 − γ) start
        let system = DMatrix::identity(n, n) - p.transpose() * gamma;
        let rhs = DVector::from_iterator(n, start.weights().iter().map(|x| (1.0 - gamma) * x));
        let sol = system.lu().solve(&rhs).ok_or(Error::NonConvergence {
            iterations: 0,
            residual: f64::NAN,
        })?;
        sol.iter().copied().collect::<Vec<f64>>()
    } else {
        iterate_visitation(game, joint, start)?
    };
    for x in d.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let total: f64 = d.iter().sum();
    for x in d.iter_mut() {
        *x /= total;
    }
    Ok(Distribution::from_raw(d))
}

fn iterate_visitation(game: &MultiAgentTabularGame, joint: &JointPolicy, start: &Distribution) -> Result<Vec<f64>> {
    let gamma = game.gamma();
    let base: Vec<f64> = start.weights().iter().map(|x| (1.0 - gamma) * x).collect();
    let mut d = base.clone();
    let max_iter = iteration_budget(gamma);
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        let mut next = base.clone();
        for (s, &mass) in d.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (a, &w) in joint.row(s).iter().enumerate() {
                if w > 0.0 {
                    game.for_each_successor(s, a, |t, prob| next[t] += gamma * mass * w * prob);
                }
            }
        }
        change = next.iter().zip(&d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        d = next;
        if change <= ITERATIVE_TOLERANCE {
            return Ok(d);
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: change,
    })
}

fn iteration_budget(gamma: f64) -> usize {
    if gamma == 0.0 {
        return 2;
    }
    (4.0 * (ITERATIVE_TOLERANCE.ln() / gamma.ln())).ceil() as usize + 100
}

/// Classical (risk-neutral) values of a joint policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskNeutralValues {
    pub v: Vec<f64>,
    /// `q[s][joint]`.
    pub q: Vec<Vec<f64>>,
}

impl RiskNeutralValues {
    /// `E_{s∼start} V(s)`.
    pub fn start_value(&self, start: &Distribution) -> f64 {
        start.expectation(&self.v)
    }
}

/// Expected undiscounted return over `horizon` steps from `ρ` under the
/// joint policy, by propagating the state distribution.
pub fn finite_horizon_return(game: &MultiAgentTabularGame, joint: &JointPolicy, horizon: usize) -> Result<f64> {
    joint.check_against(game)?;
    let n = game.n_states();
    let mut dist = game.rho().weights().to_vec();
    let mut next = vec![0.0; n];
    let mut total = 0.0;
    for _ in 0..horizon {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (s, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (j, &p) in joint.row(s).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                total += mass * p * game.reward(s, j);
                game.for_each_successor(s, j, |t, q| next[t] += mass * p * q);
            }
        }
        std::mem::swap(&mut dist, &mut next);
    }
    Ok(total)
}

/// Team-optimal deterministic policy from value iteration over joint
/// actions, factored back into per-agent choices. Ties go to the lowest
/// joint index. Iterates until the sup-norm change is below `tol`.
pub fn optimal_deterministic_policy(game: &MultiAgentTabularGame, tol: f64) -> Result<FactoredPolicy> {
    let n = game.n_states();
    let gamma = game.gamma();
    let r_max = (0..n)
        .flat_map(|s| game.reward_row(s).iter())
        .fold(0.0f64, |m, r| m.max(r.abs()))
        .max(f64::MIN_POSITIVE);
    let max_iter = ((tol * (1.0 - gamma) / r_max).ln() / gamma.ln()).ceil().max(1.0) as usize + 10;
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        for (s, out) in next.iter_mut().enumerate() {
            *out = (0..game.n_joint())
                .map(|j| game.reward(s, j) + gamma * game.expected_next(s, j, &v))
                .fold(f64::NEG_INFINITY, f64::max);
        }
        residual = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if residual < tol {
            break;
        }
    }
    if residual >= tol {
        return Err(Error::NonConvergence {
            iterations: max_iter,
            residual,
        });
    }
    let mut choices = vec![vec![0; n]; game.n_agents()];
    for s in 0..n {
        let mut best = 0;
        let mut best_q = f64::NEG_INFINITY;
        for j in 0..game.n_joint() {
            let q = game.reward(s, j) + gamma * game.expected_next(s, j, &v);
            if q > best_q + tol {
                best = j;
                best_q = q;
            }
        }
        for (agent, &a) in game.decode_joint(best).iter().enumerate() {
            choices[agent][s] = a;
        }
    }
    FactoredPolicy::deterministic(game, &choices)
}

/// Solves `V = r_π + γ P_π V` and sets `Q = r + γ P V`.
pub fn risk_neutral_evaluation(game: &MultiAgentTabularGame, joint: &JointPolicy) -> Result<RiskNeutralValues> {
    joint.check_against(game)?;
    let n = game.n_states();
    let gamma = game.gamma();
    let v: Vec<f64> = if n <= DIRECT_SOLVE_MAX_STATES {
        let (p, r) = policy_kernel(game, joint);
        let system = DMatrix::identity(n, n) - p * gamma;
        let sol = system.lu().solve(&r).ok_or(Error::NonConvergence {
            iterations: 0,
            residual: f64::NAN,
        })?;
        sol.iter().copied().collect()
    } else {
        let r_pi: Vec<f64> = (0..n)
            .map(|s| {
                joint
                    .row(s)
                    .iter()
                    .enumerate()
                    .map(|(a, w)| w * game.reward(s, a))
                    .sum()
            })
            .collect();
        let mut v = vec![0.0; n];
        let max_iter = iteration_budget(gamma);
        let mut converged = false;
        let mut change = f64::INFINITY;
        for _ in 0..max_iter {
            let next: Vec<f64> = (0..n)
                .map(|s| {
                    r_pi[s]
                        + gamma
                            * joint
                                .row(s)
                                .iter()
                                .enumerate()
                                .filter(|(_, w)| **w > 0.0)
                                .map(|(a, w)| w * game.expected_next(s, a, &v))
                                .sum::<f64>()
                })
                .collect();
            change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if change <= ITERATIVE_TOLERANCE * (1.0 - gamma) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                iterations: max_iter,
                residual: change,
            });
        }
        v
    };
    let q = (0..n)
        .map(|s| {
            (0..game.n_joint())
                .map(|a| game.reward(s, a) + gamma * game.expected_next(s, a, &v))
                .collect()
        })
        .collect();
    Ok(RiskNeutralValues { v, q })
}

/// One environment transition from `(state, joint_action)`. Only `rng`
/// advances, and deterministic games do not touch it.
pub fn sample_step(
    game: &MultiAgentTabularGame,
    state: usize,
    joint_action: usize,
    rng: &mut RngStream,
) -> Result<(usize, f64)> {
    if state >= game.n_states() {
        return Err(Error::Index {
            what: "state",
            index: state,
            limit: game.n_states(),
        });
    }
    if joint_action >= game.n_joint() {
        return Err(Error::Index {
            what: "joint action",
            index: joint_action,
            limit: game.n_joint(),
        });
    }
    let next = match game.transitions() {
        Transitions::Deterministic(f) => f[state][joint_action],
        Transitions::Dense(p) => rng.categorical(&p[state][joint_action]),
    };
    Ok((next, game.reward(state, joint_action)))
}
