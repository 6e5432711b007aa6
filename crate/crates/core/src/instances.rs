//! Seeded random instances: small dense games, interior policies and
//! feasible sum-zero perturbation directions. Used by the grad-check and
//! duality-check commands and by the test suites.

use crate::mdp::{FactoredPolicy, MultiAgentTabularGame, Transitions};
use crate::rng::{Purpose, RngStream, StreamId};

fn normalized(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Dense random game: transition rows bounded away from zero, rewards
/// uniform in `[-1, 1]`, full-support initial distribution.
pub fn random_game(seed: u64, n_states: usize, action_counts: &[usize], gamma: f64) -> MultiAgentTabularGame {
    let mut rng = RngStream::new(seed, StreamId::new(0, 0, Purpose::Sampling));
    let n_joint: usize = action_counts.iter().product();
    let transition = (0..n_states)
        .map(|_| {
            (0..n_joint)
                .map(|_| normalized((0..n_states).map(|_| rng.uniform() + 0.05).collect()))
                .collect()
        })
        .collect();
    let reward = (0..n_states)
        .map(|_| (0..n_joint).map(|_| 2.0 * rng.uniform() - 1.0).collect())
        .collect();
    let rho = normalized((0..n_states).map(|_| rng.uniform() + 0.1).collect());
    MultiAgentTabularGame::new(
        action_counts.to_vec(),
        Transitions::Dense(transition),
        reward,
        gamma,
        rho,
    )
    .expect("rows are normalized and indices in range")
}

/// Rows are normalized `U(0.1, 1.1)` weights, so every probability is
/// strictly positive.
pub fn random_interior_policy(game: &MultiAgentTabularGame, seed: u64) -> FactoredPolicy {
    let mut rng = RngStream::new(seed, StreamId::new(0, 1, Purpose::Sampling));
    let tables = game
        .action_counts()
        .iter()
        .map(|&n| {
            (0..game.n_states())
                .map(|_| normalized((0..n).map(|_| rng.uniform() + 0.1).collect()))
                .collect()
        })
        .collect();
    FactoredPolicy::from_tables(tables).expect("normalized rows")
}

/// Random direction with zero sum in every (agent, state) row, scaled so its
/// largest entry has magnitude one.
pub fn random_sum_zero_direction(policy: &FactoredPolicy, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = RngStream::new(seed, StreamId::new(0, 2, Purpose::Sampling));
    let mut dir: Vec<Vec<Vec<f64>>> = policy
        .tables()
        .iter()
        .map(|table| {
            table
                .iter()
                .map(|row| {
                    let raw: Vec<f64> = row.iter().map(|_| 2.0 * rng.uniform() - 1.0).collect();
                    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
                    raw.into_iter().map(|x| x - mean).collect()
                })
                .collect()
        })
        .collect();
    let scale = dir.iter().flatten().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale > 0.0 {
        dir.iter_mut().flatten().flatten().for_each(|x| *x /= scale);
    }
    dir
}
