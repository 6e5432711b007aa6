//! Exact optimistic evaluation of product policies under the entropic risk
//! measure, the averaged per-agent tables built from it, exact and
//! finite-difference policy gradients, and the deterministic-equilibrium
//! checker.
//!
//! The optimistic values satisfy
//!
//! ```text
//! V(s)   = β⁻¹ log Σ_a π(a|s) e^{β Q(s,a)}
//! Q(s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) V(s')
//! ```
//!
//! and the maximizing auxiliary joint policy is the per-state tilt
//! `π̂(a|s) ∝ π(a|s) e^{β Q(s,a)}`, which in general does not factorize.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    risk_neutral_evaluation, visitation_distribution, FactoredPolicy, JointPolicy, MultiAgentTabularGame,
    RiskNeutralValues,
};
use crate::risk::{soft_value_raw, tilt_into, Distribution, RiskParams};

/// Solver tolerance used whenever a gradient or a finite difference needs
/// the value function.
pub const GRADIENT_TOLERANCE: f64 = 1e-12;

/// Default tolerance on exact advantages for [`check_deterministic_nash`].
pub const NASH_TOLERANCE: f64 = 1e-8;

/// Tolerance on `Σ direction = 0` per row.
const SUM_ZERO_TOLERANCE: f64 = 1e-12;

/// Converged optimistic evaluation of one product policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimisticEvaluation {
    pub beta: f64,
    pub v: Vec<f64>,
    /// `q[s][joint]`.
    pub q: Vec<Vec<f64>>,
    /// Tilted joint policy attaining the optimistic value.
    pub aux_policy: JointPolicy,
    /// `qbar[agent][s][a_i] = β⁻¹ E_{a_{-i}∼π_{-i}} e^{β Q(s, a_i, a_{-i})}`.
    pub qbar: Vec<Vec<Vec<f64>>>,
    /// `abar[agent][s][a_i] = β⁻¹ E_{a_{-i}∼π_{-i}} e^{β (Q − V)(s, a_i, a_{-i})}`.
    pub abar: Vec<Vec<Vec<f64>>>,
    /// `sup_s |T V(s) − V(s)|` for the returned `V`.
    pub residual: f64,
    pub iterations: usize,
    /// Sup-norm change of every value-iteration step, in order.
    pub changes: Vec<f64>,
}

impl OptimisticEvaluation {
    pub fn start_value(&self, start: &Distribution) -> f64 {
        start.expectation(&self.v)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Iteration cap sufficient for value iteration from zero to reach `tol` on
/// `game`, with slack.
pub fn default_max_iter(game: &MultiAgentTabularGame, tol: f64) -> usize {
    let gamma = game.gamma();
    if gamma == 0.0 {
        return 4;
    }
    let r_max = (0..game.n_states())
        .flat_map(|s| game.reward_row(s).iter().map(|r| r.abs()))
        .fold(0.0f64, f64::max);
    let scale = (r_max / (1.0 - gamma)).max(1.0);
    let needed = ((tol * (1.0 - gamma) / gamma / scale).ln() / gamma.ln()).ceil();
    (2.0 * needed.max(1.0)) as usize + 50
}

fn fill_q(game: &MultiAgentTabularGame, v: &[f64], q: &mut [Vec<f64>]) {
    let gamma = game.gamma();
    for (s, row) in q.iter_mut().enumerate() {
        for (a, slot) in row.iter_mut().enumerate() {
            *slot = game.reward(s, a) + gamma * game.expected_next(s, a, v);
        }
    }
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Value iteration on the optimistic Bellman operator from `V ≡ 0`, stopping
/// once the sup-norm change drops to `tol·(1−γ)/γ`, which bounds the
/// distance to the fixed point by `tol`.
///
/// The returned `Q` is built from the second-to-last iterate, so that
/// `V(s) = soft_value(π_s, Q(s,·))` holds to rounding.
pub fn solve_optimistic_values(
    game: &MultiAgentTabularGame,
    policy: &FactoredPolicy,
    beta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<OptimisticEvaluation> {
    policy.check_against(game)?;
    let beta = RiskParams::new(beta)?.beta();
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let joint = policy.to_joint();
    let n = game.n_states();
    let gamma = game.gamma();
    let threshold = if gamma > 0.0 {
        tol * (1.0 - gamma) / gamma
    } else {
        f64::INFINITY
    };

    let mut v = vec![0.0; n];
    let mut q = vec![vec![0.0; game.n_joint()]; n];
    let mut changes = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        fill_q(game, &v, &mut q);
        let next: Vec<f64> = (0..n).map(|s| soft_value_raw(joint.row(s), &q[s], beta)).collect();
        let change = sup_distance(&next, &v);
        changes.push(change);
        v = next;
        if !change.is_finite() {
            break;
        }
        if change <= threshold {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: changes.len(),
            residual: changes.last().copied().unwrap_or(f64::INFINITY),
        });
    }

    let mut q_check = q.clone();
    fill_q(game, &v, &mut q_check);
    let residual = (0..n)
        .map(|s| (soft_value_raw(joint.row(s), &q_check[s], beta) - v[s]).abs())
        .fold(0.0, f64::max);

    let mut aux = vec![vec![0.0; game.n_joint()]; n];
    for s in 0..n {
        tilt_into(joint.row(s), &q[s], beta, &mut aux[s])?;
    }
    let abar = (0..game.n_agents())
        .map(|agent| averaged_advantage_table(game, policy, &q, &v, beta, agent))
        .collect::<Vec<_>>();
    let qbar = abar.iter().map(|table| scale_by_exp_value(table, &v, beta)).collect();

    Ok(OptimisticEvaluation {
        beta,
        v,
        q,
        aux_policy: JointPolicy::from_raw(aux),
        qbar,
        abar,
        residual,
        iterations: changes.len(),
        changes,
    })
}

/// Solves at `tol` with the default iteration cap.
pub fn evaluate(
    game: &MultiAgentTabularGame,
    policy: &FactoredPolicy,
    beta: f64,
    tol: f64,
) -> Result<OptimisticEvaluation> {
    solve_optimistic_values(game, policy, beta, tol, default_max_iter(game, tol))
}

fn averaged_advantage_table(
    game: &MultiAgentTabularGame,
    policy: &FactoredPolicy,
    q: &[Vec<f64>],
    v: &[f64],
    beta: f64,
    agent: usize,
) -> Vec<Vec<f64>> {
    let n_actions = game.action_counts()[agent];
    (0..game.n_states())
        .map(|s| {
            let mut row = vec![0.0; n_actions];
            for (j, &qa) in q[s].iter().enumerate() {
                let w = policy.others_prob(game, s, j, agent);
                if w > 0.0 {
                    row[game.decode_joint(j)[agent]] += w * (beta * (qa - v[s])).exp();
                }
            }
            row.iter_mut().for_each(|x| *x /= beta);
            row
        })
        .collect()
}

fn scale_by_exp_value(table: &[Vec<f64>], v: &[f64], beta: f64) -> Vec<Vec<f64>> {
    table
        .iter()
        .zip(v)
        .map(|(row, &vs)| {
            let scale = (beta * vs).exp();
            row.iter().map(|x| x * scale).collect()
        })
        .collect()
}

fn check_agent(game: &MultiAgentTabularGame, agent: usize) -> Result<()> {
    if agent >= game.n_agents() {
        return Err(Error::Index {
            what: "agent",
            index: agent,
            limit: game.n_agents(),
        });
    }
    Ok(())
}

/// `Q̄_i(s, a_i) = β⁻¹ E_{a_{-i}∼π_{-i}} e^{β Q(s, a_i, a_{-i})}`, by exact
/// enumeration of the other agents' joint actions.
pub fn averaged_optimistic_q(
    game: &MultiAgentTabularGame,
    eval: &OptimisticEvaluation,
    policy: &FactoredPolicy,
    agent: usize,
) -> Result<Vec<Vec<f64>>> {
    check_agent(game, agent)?;
    policy.check_against(game)?;
    let table = averaged_advantage_table(game, policy, &eval.q, &eval.v, eval.beta, agent);
    Ok(scale_by_exp_value(&table, &eval.v, eval.beta))
}

/// `Ā_i(s, a_i) = β⁻¹ E_{a_{-i}∼π_{-i}} e^{β A(s, a_i, a_{-i})}` with
/// `A = Q − V`; equals `Q̄_i · e^{−β V(s)}`.
pub fn averaged_optimistic_advantage(
    game: &MultiAgentTabularGame,
    eval: &OptimisticEvaluation,
    policy: &FactoredPolicy,
    agent: usize,
) -> Result<Vec<Vec<f64>>> {
    check_agent(game, agent)?;
    policy.check_against(game)?;
    Ok(averaged_advantage_table(
        game, policy, &eval.q, &eval.v, eval.beta, agent,
    ))
}

/// Partial derivatives `∂ E_{s₀∼start} V / ∂θ_{s,a_i}` per agent, laid out
/// like the policy tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientTable {
    pub per_agent: Vec<Vec<Vec<f64>>>,
}

impl GradientTable {
    /// Inner product with a direction of the same shape.
    pub fn directional(&self, direction: &[Vec<Vec<f64>>]) -> f64 {
        self.per_agent
            .iter()
            .flatten()
            .zip(direction.iter().flatten())
            .map(|(g, d)| g.iter().zip(d).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    /// Component in the simplex tangent space: every (agent, state) row has
    /// its mean removed.
    pub fn tangent(&self) -> GradientTable {
        let per_agent = self
            .per_agent
            .iter()
            .map(|table| {
                table
                    .iter()
                    .map(|row| {
                        let mean = row.iter().sum::<f64>() / row.len() as f64;
                        row.iter().map(|x| x - mean).collect()
                    })
                    .collect()
            })
            .collect();
        GradientTable { per_agent }
    }

    pub fn max_abs(&self) -> f64 {
        self.per_agent
            .iter()
            .flatten()
            .flatten()
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

fn check_start(game: &MultiAgentTabularGame, start: &Distribution) -> Result<()> {
    if start.len() != game.n_states() {
        return Err(Error::Dimension {
            expected: game.n_states(),
            found: start.len(),
        });
    }
    Ok(())
}

/// `g_i[s][a_i] = d^{π̂}_{start}(s) · Ā_i(s, a_i) / (1 − γ)`, where `d^{π̂}` is
/// the visitation distribution of the tilted auxiliary policy.
///
/// Requires an interior policy; use [`finite_difference_gradient`] for
/// directional derivatives at the boundary.
pub fn exact_policy_gradient(
    game: &MultiAgentTabularGame,
    policy: &FactoredPolicy,
    beta: f64,
    start: &Distribution,
) -> Result<GradientTable> {
    policy.check_against(game)?;
    check_start(game, start)?;
    if !policy.is_interior() {
        return Err(Error::BoundaryPolicy);
    }
    let eval = evaluate(game, policy, beta, GRADIENT_TOLERANCE)?;
    let d = visitation_distribution(game, &eval.aux_policy, start)?;
    let scale = 1.0 / (1.0 - game.gamma());
    let per_agent = eval
        .abar
        .iter()
        .map(|table| {
            table
                .iter()
                .enumerate()
                .map(|(s, row)| row.iter().map(|x| scale * d[s] * x).collect())
                .collect()
        })
        .collect();
    Ok(GradientTable { per_agent })
}

/// Risk-neutral gradient `d^π(s) · E_{a_{-i}} A⁰(s, a_i, a_{-i}) / (1 − γ)`.
pub fn classical_policy_gradient(
    game: &MultiAgentTabularGame,
    policy: &FactoredPolicy,
    start: &Distribution,
) -> Result<GradientTable> {
    policy.check_against(game)?;
    check_start(game, start)?;
    let joint = policy.to_joint();
    let values = risk_neutral_evaluation(game, &joint)?;
    let d = visitation_distribution(game, &joint, start)?;
    let scale = 1.0 / (1.0 - game.gamma());
    let per_agent = risk_neutral_averaged_q(game, policy, &values)
        .into_iter()
        .map(|table| {
            table
                .into_iter()
                .enumerate()
                .map(|(s, row)| row.into_iter().map(|x| scale * d[s] * (x - values.v[s])).collect())
                .collect()
        })
        .collect();
    Ok(GradientTable { per_agent })
}

/// Linear average `E_{a_{-i}∼π_{-i}} Q⁰(s, a_i, a_{-i})` for every agent.
pub fn risk_neutral_averaged_q(
    game: &MultiAgentTabularGame,
    policy: &FactoredPolicy,
    values: &RiskNeutralValues,
) -> Vec<Vec<Vec<f64>>> {
    (0..game.n_agents())
        .map(|agent| {
            (0..game.n_states())
                .map(|s| {
                    let mut row = vec![0.0; game.action_counts()[agent]];
                    for (j, &qa) in values.q[s].iter().enumerate() {
                        row[game.decode_joint(j)[agent]] += policy.others_prob(game, s, j, agent) * qa;
                    }
                    row
                })
                .collect()
        })
        .collect()
}

fn check_direction(policy: &FactoredPolicy, direction: &[Vec<Vec<f64>>]) -> Result<()> {
    if direction.len() != policy.n_agents() {
        return Err(Error::Dimension {
            expected: policy.n_agents(),
            found: direction.len(),
        });
    }
    for (agent, table) in direction.iter().enumerate() {
        if table.len() != policy.n_states() {
            return Err(Error::Dimension {
                expected: policy.n_states(),
                found: table.len(),
            });
        }
        for row in table {
            if row.len() != policy.n_actions(agent) {
                return Err(Error::Dimension {
                    expected: policy.n_actions(agent),
                    found: row.len(),
                });
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("direction"));
            }
            let sum: f64 = row.iter().sum();
            let scale: f64 = row.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
            if sum.abs() > SUM_ZERO_TOLERANCE * scale {
                return Err(Error::InvalidParameter(format!(
                    "direction row sums to {sum}, expected 0"
                )));
            }
        }
    }
    Ok(())
}

fn shifted(policy: &FactoredPolicy, direction: &[Vec<Vec<f64>>], h: f64) -> Result<FactoredPolicy> {
    let tables = policy
        .tables()
        .iter()
        .zip(direction)
        .map(|(table, dtable)| {
            table
                .iter()
                .zip(dtable)
                .map(|(row, drow)| row.iter().zip(drow).map(|(p, d)| p + h * d).collect::<Vec<f64>>())
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>();
    if tables.iter().flatten().flatten().any(|&p| p < 0.0) {
        return Err(Error::StepSize);
    }
    FactoredPolicy::from_tables(tables)
}

/// Optimistic objective `E_{s₀∼start} V(s₀)` solved to [`GRADIENT_TOLERANCE`].
pub fn optimistic_objective(
    game: &MultiAgentTabularGame,
    policy: &FactoredPolicy,
    beta: f64,
    start: &Distribution,
) -> Result<f64> {
    check_start(game, start)?;
    Ok(evaluate(game, policy, beta, GRADIENT_TOLERANCE)?.start_value(start))
}

/// Central difference `(F(θ + h·dir) − F(θ − h·dir)) / 2h` of the optimistic
/// objective along a per-row sum-zero direction.
pub fn finite_difference_gradient(
    game: &MultiAgentTabularGame,
    policy: &FactoredPolicy,
    beta: f64,
    start: &Distribution,
    direction: &[Vec<Vec<f64>>],
    h: f64,
) -> Result<f64> {
    policy.check_against(game)?;
    check_direction(policy, direction)?;
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidParameter(format!("step h must be positive, got {h}")));
    }
    if direction.iter().flatten().flatten().all(|&d| d == 0.0) {
        return Ok(0.0);
    }
    let plus = shifted(policy, direction, h)?;
    let minus = shifted(policy, direction, -h)?;
    let f_plus = optimistic_objective(game, &plus, beta, start)?;
    let f_minus = optimistic_objective(game, &minus, beta, start)?;
    Ok((f_plus - f_minus) / (2.0 * h))
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn project_to_simplex(v: &[f64]) -> Result<Distribution> {
    if v.is_empty() {
        return Err(Error::InvalidDistribution("cannot project an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("projection input"));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            threshold = candidate;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - threshold).max(0.0)).collect();
    // Renormalize away the rounding in the threshold.
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Ok(Distribution::from_raw(out))
}

/// `θ_{i,s} ← Proj(θ_{i,s} + step · tables[i][s])` for every agent and state.
pub fn projected_step(policy: &FactoredPolicy, tables: &[Vec<Vec<f64>>], step: f64) -> Result<FactoredPolicy> {
    let mut next = policy.clone();
    for (agent, table) in tables.iter().enumerate() {
        for (s, row) in table.iter().enumerate() {
            let moved: Vec<f64> = policy
                .row(agent, s)
                .iter()
                .zip(row)
                .map(|(p, g)| p + step * g)
                .collect();
            next.set_row(agent, s, project_to_simplex(&moved)?.into_inner())?;
        }
    }
    Ok(next)
}

/// Result of checking a deterministic product policy for unilateral
/// improvements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashReport {
    /// Per agent, `max_{s, a_i} Q⁰(s, a_i, π_{-i}(s)) − V⁰(s)`.
    pub max_advantage: Vec<f64>,
    pub tolerance: f64,
    pub is_nash: bool,
    /// First-order stationarity of `E_ρ V`; equivalent to `is_nash` for
    /// deterministic policies when `ρ` has full support.
    pub is_stationary: bool,
    /// Risk-neutral `E_{s∼ρ} V⁰(s)`.
    pub start_value: f64,
}

/// Deterministic policies have identical optimistic and risk-neutral values
/// (the tilt of a point mass is the point mass), so the check runs on the
/// classical `V⁰, Q⁰`.
pub fn check_deterministic_nash(game: &MultiAgentTabularGame, policy: &FactoredPolicy, tol: f64) -> Result<NashReport> {
    policy.check_against(game)?;
    if !policy.is_deterministic() {
        return Err(Error::Precondition("Nash check needs a deterministic policy".into()));
    }
    let values = risk_neutral_evaluation(game, &policy.to_joint())?;
    let mut max_advantage = vec![f64::NEG_INFINITY; game.n_agents()];
    for s in 0..game.n_states() {
        let chosen: Vec<usize> = (0..game.n_agents())
            .map(|i| policy.deterministic_action(i, s).expect("deterministic rows"))
            .collect();
        for (agent, best) in max_advantage.iter_mut().enumerate() {
            let mut actions = chosen.clone();
            for a in 0..game.action_counts()[agent] {
                actions[agent] = a;
                let j = game.encode_joint(&actions)?;
                *best = best.max(values.q[s][j] - values.v[s]);
            }
        }
    }
    let is_nash = max_advantage.iter().all(|&m| m <= tol);
    Ok(NashReport {
        max_advantage,
        tolerance: tol,
        is_nash,
        is_stationary: is_nash,
        start_value: values.start_value(game.rho()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{random_game, random_interior_policy, random_sum_zero_direction};
    use crate::mdp::{joint_from_factored, Transitions};
    use crate::risk::{kl_divergence_raw, Distribution};
    use proptest::prelude::*;

    fn constant_reward_game(reward: f64) -> MultiAgentTabularGame {
        MultiAgentTabularGame::new(
            vec![1],
            Transitions::Deterministic(vec![vec![0]]),
            vec![vec![reward]],
            0.9,
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn zero_reward_gives_zero_values_and_untilted_aux() {
        let mut game = random_game(1, 3, &[2, 2], 0.9);
        game = MultiAgentTabularGame::new(
            game.action_counts().to_vec(),
            game.transitions().clone(),
            vec![vec![0.0; 4]; 3],
            0.9,
            game.rho().weights().to_vec(),
        )
        .unwrap();
        let policy = random_interior_policy(&game, 2);
        let eval = evaluate(&game, &policy, 1.3, 1e-12).unwrap();
        assert!(eval.v.iter().all(|v| *v == 0.0));
        assert!(eval.q.iter().flatten().all(|q| *q == 0.0));
        let joint = joint_from_factored(&policy);
        for s in 0..3 {
            for (x, y) in eval.aux_policy.row(s).iter().zip(joint.row(s)) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_state_single_action_geometric_value() {
        let game = constant_reward_game(1.0);
        let policy = FactoredPolicy::uniform(&game);
        for beta in [0.01, 1.0, 7.0] {
            let eval = evaluate(&game, &policy, beta, 1e-12).unwrap();
            assert!((eval.v[0] - 10.0).abs() <= 1e-11, "{}", eval.v[0]);
        }
    }

    #[test]
    fn solver_rejects_bad_arguments() {
        let game = constant_reward_game(1.0);
        let policy = FactoredPolicy::uniform(&game);
        assert!(solve_optimistic_values(&game, &policy, 0.0, 1e-9, 100).is_err());
        assert!(solve_optimistic_values(&game, &policy, 1.0, 0.0, 100).is_err());
        assert!(matches!(
            solve_optimistic_values(&game, &policy, 1.0, 1e-12, 3),
            Err(Error::NonConvergence { iterations: 3, .. })
        ));
    }

    #[test]
    fn averaged_q_two_point_example() {
        // Agent 0 has one action, agent 1 uniform over two actions whose
        // one-step values are 0 and 1. With γ = 0 the Q table is the reward.
        let game = MultiAgentTabularGame::new(
            vec![1, 2],
            Transitions::Deterministic(vec![vec![0, 0]]),
            vec![vec![0.0, 1.0]],
            0.0,
            vec![1.0],
        )
        .unwrap();
        let policy = FactoredPolicy::uniform(&game);
        let eval = evaluate(&game, &policy, 1.0, 1e-12).unwrap();
        let qbar = averaged_optimistic_q(&game, &eval, &policy, 0).unwrap();
        assert!((qbar[0][0] - 1.859_140_914_229_522_6).abs() < 1e-14);
        assert_eq!(qbar, eval.qbar[0]);
    }

    #[test]
    fn averaged_q_of_zero_q_is_inverse_beta() {
        let game = MultiAgentTabularGame::new(
            vec![2, 3],
            Transitions::Deterministic(vec![vec![0; 6]]),
            vec![vec![0.0; 6]],
            0.5,
            vec![1.0],
        )
        .unwrap();
        let policy = FactoredPolicy::uniform(&game);
        let eval = evaluate(&game, &policy, 4.0, 1e-12).unwrap();
        for table in eval.qbar.iter().chain(&eval.abar) {
            assert!(table.iter().flatten().all(|x| (*x - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn advantage_matches_brute_force_enumeration() {
        let game = random_game(3, 3, &[2, 3], 0.8);
        let policy = random_interior_policy(&game, 3);
        let beta = 0.7;
        let eval = evaluate(&game, &policy, beta, 1e-12).unwrap();
        for agent in 0..2 {
            let other = 1 - agent;
            for s in 0..3 {
                for ai in 0..game.action_counts()[agent] {
                    let mut total = 0.0;
                    for ao in 0..game.action_counts()[other] {
                        let mut acts = [0usize; 2];
                        acts[agent] = ai;
                        acts[other] = ao;
                        let j = game.encode_joint(&acts).unwrap();
                        total += policy.row(other, s)[ao] * (beta * (eval.q[s][j] - eval.v[s])).exp() / beta;
                    }
                    let got = eval.abar[agent][s][ai];
                    assert!((got - total).abs() <= 1e-12 * total.abs());
                }
            }
        }
    }

    #[test]
    fn evaluation_invariants_hold() {
        for seed in 0..10 {
            let game = random_game(seed, 4, &[2, 2], 0.9);
            let policy = random_interior_policy(&game, seed);
            for beta in [0.1, 1.0, 5.0] {
                let eval = evaluate(&game, &policy, beta, 1e-10).unwrap();
                assert!(eval.residual <= 1e-10);
                let joint = joint_from_factored(&policy);
                for s in 0..4 {
                    let sv = soft_value_raw(joint.row(s), &eval.q[s], beta);
                    assert!((sv - eval.v[s]).abs() <= 1e-10);
                    // Duality at the maximizer.
                    let tilt = eval.aux_policy.row(s);
                    let objective = tilt.iter().zip(&eval.q[s]).map(|(p, q)| p * q).sum::<f64>()
                        - kl_divergence_raw(tilt, joint.row(s)) / beta;
                    assert!((objective - eval.v[s]).abs() <= 1e-9);
                    for agent in 0..2 {
                        let mean: f64 = policy
                            .row(agent, s)
                            .iter()
                            .zip(&eval.abar[agent][s])
                            .map(|(p, a)| p * a)
                            .sum();
                        assert!((mean - 1.0 / beta).abs() <= 1e-9);
                        let qmean: f64 = policy
                            .row(agent, s)
                            .iter()
                            .zip(&eval.qbar[agent][s])
                            .map(|(p, a)| p * a)
                            .sum();
                        let target = (beta * eval.v[s]).exp() / beta;
                        assert!((qmean - target).abs() <= 1e-9 * target);
                        for (a, q) in eval.abar[agent][s].iter().zip(&eval.qbar[agent][s]) {
                            let expect = q * (-beta * eval.v[s]).exp();
                            assert!((a - expect).abs() <= 1e-9 * expect.abs());
                        }
                    }
                }
                for w in eval.changes.windows(2) {
                    assert!(w[1] <= 0.9 * w[0] + 1e-14, "{:?}", w);
                }
            }
        }
    }

    #[test]
    fn aux_policy_is_gradient_of_soft_value() {
        let game = random_game(8, 3, &[2, 2], 0.9);
        let policy = random_interior_policy(&game, 8);
        let beta = 1.5;
        let eval = evaluate(&game, &policy, beta, 1e-12).unwrap();
        let joint = joint_from_factored(&policy);
        let h = 1e-6;
        for s in 0..3 {
            for a in 0..4 {
                let mut up = eval.q[s].clone();
                let mut down = eval.q[s].clone();
                up[a] += h;
                down[a] -= h;
                let fd =
                    (soft_value_raw(joint.row(s), &up, beta) - soft_value_raw(joint.row(s), &down, beta)) / (2.0 * h);
                let exact = eval.aux_policy.row(s)[a];
                assert!((fd - exact).abs() <= 1e-6 * exact.max(1e-3), "{fd} vs {exact}");
            }
        }
    }

    #[test]
    fn values_increase_with_beta() {
        let game = random_game(9, 4, &[2, 2], 0.9);
        let policy = random_interior_policy(&game, 9);
        let mut previous: Option<Vec<f64>> = None;
        for beta in [0.05, 0.2, 1.0, 3.0, 10.0] {
            let eval = evaluate(&game, &policy, beta, 1e-12).unwrap();
            if let Some(prev) = &previous {
                for (lo, hi) in prev.iter().zip(&eval.v) {
                    assert!(hi >= &(lo - 1e-12));
                }
            }
            previous = Some(eval.v);
        }
    }

    #[test]
    fn gradient_of_zero_reward_is_constant_per_state() {
        let base = random_game(10, 3, &[2, 2], 0.9);
        let game = MultiAgentTabularGame::new(
            vec![2, 2],
            base.transitions().clone(),
            vec![vec![0.0; 4]; 3],
            0.9,
            base.rho().weights().to_vec(),
        )
        .unwrap();
        let policy = random_interior_policy(&game, 10);
        let beta = 2.0;
        let g = exact_policy_gradient(&game, &policy, beta, game.rho()).unwrap();
        let d = visitation_distribution(&game, &joint_from_factored(&policy), game.rho()).unwrap();
        for table in &g.per_agent {
            for (s, row) in table.iter().enumerate() {
                for x in row {
                    assert!((x - d[s] / (beta * 0.1)).abs() < 1e-10);
                }
            }
        }
        assert!(g.tangent().max_abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..4 {
            let game = random_game(100 + seed, 3, &[2, 2], 0.9);
            let policy = random_interior_policy(&game, seed);
            let g = exact_policy_gradient(&game, &policy, 1.0, game.rho()).unwrap();
            for k in 0..3 {
                let dir = random_sum_zero_direction(&policy, 10 * seed + k);
                let exact = g.directional(&dir);
                let fd = finite_difference_gradient(&game, &policy, 1.0, game.rho(), &dir, 1e-5).unwrap();
                let fd_half = finite_difference_gradient(&game, &policy, 1.0, game.rho(), &dir, 5e-6).unwrap();
                assert!((fd - exact).abs() <= 1e-4 * exact.abs(), "{fd} vs {exact}");
                assert!((fd - fd_half).abs() <= 1e-4 * exact.abs());
            }
        }
    }

    #[test]
    fn small_beta_gradient_matches_classical() {
        let game = random_game(20, 3, &[2, 2], 0.9);
        let policy = random_interior_policy(&game, 20);
        let optimistic = exact_policy_gradient(&game, &policy, 1e-6, game.rho())
            .unwrap()
            .tangent();
        let classical = classical_policy_gradient(&game, &policy, game.rho()).unwrap().tangent();
        for (a, b) in optimistic
            .per_agent
            .iter()
            .flatten()
            .flatten()
            .zip(classical.per_agent.iter().flatten().flatten())
        {
            assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn finite_difference_edge_cases() {
        let game = random_game(30, 2, &[2, 2], 0.9);
        let policy = random_interior_policy(&game, 30);
        let zero = vec![vec![vec![0.0; 2]; 2]; 2];
        assert_eq!(
            finite_difference_gradient(&game, &policy, 1.0, game.rho(), &zero, 1e-5).unwrap(),
            0.0
        );

        let mut not_sum_zero = zero.clone();
        not_sum_zero[0][0][0] = 1.0;
        assert!(finite_difference_gradient(&game, &policy, 1.0, game.rho(), &not_sum_zero, 1e-5).is_err());

        let mut big = zero.clone();
        big[0][0] = vec![1.0, -1.0];
        assert!(matches!(
            finite_difference_gradient(&game, &policy, 1.0, game.rho(), &big, 2.0),
            Err(Error::StepSize)
        ));
    }

    #[test]
    fn symmetric_game_has_zero_derivative_along_swap() {
        // Two agents, one state, payoff symmetric in the agents.
        let reward = vec![vec![1.0, -0.5, -0.5, 2.0]];
        let game = MultiAgentTabularGame::new(
            vec![2, 2],
            Transitions::Deterministic(vec![vec![0; 4]]),
            reward,
            0.9,
            vec![1.0],
        )
        .unwrap();
        let policy = FactoredPolicy::from_tables(vec![vec![vec![0.3, 0.7]], vec![vec![0.3, 0.7]]]).unwrap();
        let dir = vec![vec![vec![1.0, -1.0]], vec![vec![-1.0, 1.0]]];
        let fd = finite_difference_gradient(&game, &policy, 1.0, game.rho(), &dir, 1e-5).unwrap();
        assert!(fd.abs() < 1e-6, "{fd}");
    }

    #[test]
    fn boundary_policy_rejected_by_exact_gradient() {
        let game = random_game(31, 2, &[2, 2], 0.9);
        let policy = FactoredPolicy::deterministic(&game, &[vec![0, 1], vec![1, 1]]).unwrap();
        assert!(matches!(
            exact_policy_gradient(&game, &policy, 1.0, game.rho()),
            Err(Error::BoundaryPolicy)
        ));
    }

    #[test]
    fn projection_examples() {
        let p = project_to_simplex(&[0.2, 0.3, 0.5]).unwrap();
        for (a, b) in p.weights().iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(project_to_simplex(&[1.2, -0.2]).unwrap().weights(), &[1.0, 0.0]);
        assert_eq!(project_to_simplex(&[0.6, 0.6]).unwrap().weights(), &[0.5, 0.5]);
        assert!(project_to_simplex(&[f64::NAN]).is_err());
    }

    #[test]
    fn projection_matches_grid_search() {
        // Brute force over a 1/2000 grid of the 3-simplex.
        let v = [0.9, 0.45, -0.3];
        let p = project_to_simplex(&v).unwrap();
        let n = 2000;
        let mut best = (f64::INFINITY, [0.0; 3]);
        for i in 0..=n {
            for j in 0..=(n - i) {
                let x = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
                let dist: f64 = x.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, x);
                }
            }
        }
        for (a, b) in p.weights().iter().zip(best.1) {
            assert!((a - b).abs() <= 1.0 / n as f64);
        }
    }

    proptest! {
        #[test]
        fn projection_properties(v in prop::collection::vec(-5.0f64..5.0, 1..7)) {
            let p = project_to_simplex(&v).unwrap();
            prop_assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.weights().iter().all(|x| *x >= 0.0));
            let again = project_to_simplex(p.weights()).unwrap();
            for (a, b) in again.weights().iter().zip(p.weights()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] >= v[j] {
                        prop_assert!(p[i] >= p[j] - 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn nash_single_agent_greedy_optimum() {
        // Two-state chain, the optimal action in both states is 1.
        let game = MultiAgentTabularGame::new(
            vec![2],
            Transitions::Deterministic(vec![vec![0, 1], vec![0, 1]]),
            vec![vec![0.0, 1.0], vec![0.0, 2.0]],
            0.9,
            vec![0.5, 0.5],
        )
        .unwrap();
        let optimal = FactoredPolicy::deterministic(&game, &[vec![1, 1]]).unwrap();
        let report = check_deterministic_nash(&game, &optimal, NASH_TOLERANCE).unwrap();
        assert!(report.is_nash && report.is_stationary);
        let poor = FactoredPolicy::deterministic(&game, &[vec![0, 0]]).unwrap();
        assert!(!check_deterministic_nash(&game, &poor, NASH_TOLERANCE).unwrap().is_nash);
        assert!(matches!(
            check_deterministic_nash(&game, &FactoredPolicy::uniform(&game), NASH_TOLERANCE),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn deterministic_policy_optimistic_equals_risk_neutral() {
        let game = random_game(40, 3, &[2, 2], 0.9);
        let policy = FactoredPolicy::deterministic(&game, &[vec![0, 1, 1], vec![1, 0, 1]]).unwrap();
        let rn = risk_neutral_evaluation(&game, &policy.to_joint()).unwrap();
        let opt = evaluate(&game, &policy, 3.0, 1e-12).unwrap();
        for (a, b) in rn.v.iter().zip(&opt.v) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn start_distribution_is_validated() {
        let game = random_game(41, 3, &[2, 2], 0.9);
        let policy = random_interior_policy(&game, 41);
        assert!(exact_policy_gradient(&game, &policy, 1.0, &Distribution::uniform(2)).is_err());
    }
}
