//! Benchmark environments: the two-agent 4×4 coordination gridworld and a
//! discretized two-agent ball-balancing table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{FactoredPolicy, MultiAgentTabularGame, Transitions};

/// Default gridworld payoff, indexed `[x - 1][y - 1]`.
pub const GRIDWORLD_REWARD: [[f64; 4]; 4] = [
    [-10.0, -10.0, -10.0, 0.0],
    [-10.0, 10.0, -10.0, 0.0],
    [-10.0, -10.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 5.0],
];

pub const GRID_SIZE: usize = 4;

/// Moves available to each gridworld agent, by action index.
pub const GRID_MOVES: [i64; 3] = [-1, 0, 1];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardTiming {
    /// Reward of the cell entered.
    #[default]
    OnArrival,
    /// Reward of the cell left.
    OnDeparture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridworldConfig {
    pub reward_table: Vec<Vec<f64>>,
    pub reward_timing: RewardTiming,
    /// Probability that an agent's executed move is redrawn uniformly.
    pub action_noise: f64,
    pub gamma: f64,
    /// Initial distribution over the 16 cells in state order; uniform when
    /// absent.
    pub rho: Option<Vec<f64>>,
}

impl Default for GridworldConfig {
    fn default() -> Self {
        Self {
            reward_table: GRIDWORLD_REWARD.iter().map(|r| r.to_vec()).collect(),
            reward_timing: RewardTiming::OnArrival,
            action_noise: 0.0,
            gamma: 0.9,
            rho: None,
        }
    }
}

/// State index of the 1-indexed cell `(x, y)`. Agent 0 moves `x`, agent 1
/// moves `y`.
pub fn grid_state(x: usize, y: usize) -> usize {
    assert!((1..=GRID_SIZE).contains(&x) && (1..=GRID_SIZE).contains(&y));
    (x - 1) * GRID_SIZE + (y - 1)
}

/// 1-indexed cell of a state index.
pub fn grid_cell(state: usize) -> (usize, usize) {
    (state / GRID_SIZE + 1, state % GRID_SIZE + 1)
}

/// `((x − 1) + move) mod 4 + 1`.
pub fn grid_wrap(coord: usize, action: usize) -> usize {
    let zero_based = (coord as i64 - 1 + GRID_MOVES[action]).rem_euclid(GRID_SIZE as i64);
    zero_based as usize + 1
}

pub fn build_gridworld(config: &GridworldConfig) -> Result<MultiAgentTabularGame> {
    if config.reward_table.len() != GRID_SIZE || config.reward_table.iter().any(|r| r.len() != GRID_SIZE) {
        return Err(Error::Config("gridworld reward_table must be 4x4".into()));
    }
    if !(0.0..1.0).contains(&config.action_noise) {
        return Err(Error::Config(format!(
            "action_noise must lie in [0, 1), got {}",
            config.action_noise
        )));
    }
    let n_states = GRID_SIZE * GRID_SIZE;
    let n_moves = GRID_MOVES.len();
    let cell_reward = |s: usize| {
        let (x, y) = grid_cell(s);
        config.reward_table[x - 1][y - 1]
    };
    let step = |s: usize, ax: usize, ay: usize| {
        let (x, y) = grid_cell(s);
        grid_state(grid_wrap(x, ax), grid_wrap(y, ay))
    };
    // P(executed | intended) per agent.
    let exec = |intended: usize, executed: usize| {
        let base = config.action_noise / n_moves as f64;
        if intended == executed {
            1.0 - config.action_noise + base
        } else {
            base
        }
    };

    let mut reward = vec![vec![0.0; n_moves * n_moves]; n_states];
    let transition = if config.action_noise == 0.0 {
        let mut f = vec![vec![0; n_moves * n_moves]; n_states];
        for s in 0..n_states {
            for ax in 0..n_moves {
                for ay in 0..n_moves {
                    let j = ax * n_moves + ay;
                    let next = step(s, ax, ay);
                    f[s][j] = next;
                    reward[s][j] = match config.reward_timing {
                        RewardTiming::OnArrival => cell_reward(next),
                        RewardTiming::OnDeparture => cell_reward(s),
                    };
                }
            }
        }
        Transitions::Deterministic(f)
    } else {
        let mut p = vec![vec![vec![0.0; n_states]; n_moves * n_moves]; n_states];
        for s in 0..n_states {
            for ax in 0..n_moves {
                for ay in 0..n_moves {
                    let j = ax * n_moves + ay;
                    for ex in 0..n_moves {
                        for ey in 0..n_moves {
                            p[s][j][step(s, ex, ey)] += exec(ax, ex) * exec(ay, ey);
                        }
                    }
                    reward[s][j] = match config.reward_timing {
                        RewardTiming::OnArrival => p[s][j].iter().enumerate().map(|(t, q)| q * cell_reward(t)).sum(),
                        RewardTiming::OnDeparture => cell_reward(s),
                    };
                }
            }
        }
        Transitions::Dense(p)
    };
    let rho = config
        .rho
        .clone()
        .unwrap_or_else(|| vec![1.0 / n_states as f64; n_states]);
    MultiAgentTabularGame::new(vec![n_moves, n_moves], transition, reward, config.gamma, rho)
}

/// Shortest wrapped move from `from` toward `to` on a 4-cycle; ties (distance
/// two) go through `via`'s side when given, else downward.
fn move_toward(from: usize, to: usize, via: Option<usize>) -> usize {
    if from == to {
        return 1;
    }
    let up = (to as i64 - from as i64).rem_euclid(GRID_SIZE as i64);
    match up {
        1 => 2,
        3 => 0,
        _ => match via {
            Some(v) if grid_wrap(from, 2) == v => 2,
            _ => 0,
        },
    }
}

/// Deterministic policy in which each agent walks its coordinate to the
/// target cell along a shortest wrapped path and then stays. Distance-two
/// coordinates step through `via` when it is adjacent.
pub fn gridworld_transit_policy(
    game: &MultiAgentTabularGame,
    target: (usize, usize),
    via: Option<(usize, usize)>,
) -> Result<FactoredPolicy> {
    let n_states = GRID_SIZE * GRID_SIZE;
    let mut choices = vec![vec![0; n_states]; 2];
    for s in 0..n_states {
        let (x, y) = grid_cell(s);
        choices[0][s] = move_toward(x, target.0, via.map(|v| v.0));
        choices[1][s] = move_toward(y, target.1, via.map(|v| v.1));
    }
    FactoredPolicy::deterministic(game, &choices)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BallBalanceConfig {
    /// Odd count of position cells, centered on zero.
    pub position_bins: usize,
    /// Odd count of velocity cells, centered on zero.
    pub velocity_bins: usize,
    /// Odd count of table tilts; the tilt is the difference of the two
    /// applied force levels, clamped to this range.
    pub tilt_levels: usize,
    /// Force levels available to each agent at its end of the table.
    pub force_levels: usize,
    /// Velocity change per unit tilt per step.
    pub acceleration: i64,
    pub episode_length: usize,
    /// Per-step reward `c0 − c1 · |position| / max_position` while on the table.
    pub c0: f64,
    pub c1: f64,
    /// Extra per-step reward `lift_bonus · min(f0, f1) / (force_levels − 1)`
    /// for holding the table up; rewards jointly high forces.
    pub lift_bonus: f64,
    /// Tilt magnitude at or above which the ball is thrown off the table
    /// at once, whatever its position.
    pub spill_tilt: Option<i64>,
    /// Reward on the step the ball leaves the table; the ball is then reset
    /// to the stationary center.
    pub fall_penalty: f64,
    pub gamma: f64,
    /// Start states are drawn uniformly with `|position| ≤ start_position`
    /// and `|velocity| ≤ start_velocity`.
    pub start_position: usize,
    pub start_velocity: usize,
}

impl Default for BallBalanceConfig {
    fn default() -> Self {
        Self {
            position_bins: 21,
            velocity_bins: 11,
            tilt_levels: 5,
            force_levels: 3,
            acceleration: 1,
            episode_length: 200,
            c0: 1.0,
            c1: 25.0,
            lift_bonus: 25.0,
            spill_tilt: Some(2),
            fall_penalty: 250.0,
            gamma: 0.95,
            start_position: 6,
            start_velocity: 2,
        }
    }
}

/// Decoded ball-balancing state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BallState {
    pub position: i64,
    pub velocity: i64,
}

impl BallBalanceConfig {
    fn validate(&self) -> Result<()> {
        for (name, bins) in [
            ("position_bins", self.position_bins),
            ("velocity_bins", self.velocity_bins),
            ("tilt_levels", self.tilt_levels),
        ] {
            if bins < 3 {
                return Err(Error::Config(format!("{name} must be at least 3, got {bins}")));
            }
            if bins % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {bins}")));
            }
        }
        if self.force_levels < 2 {
            return Err(Error::Config("force_levels must be at least 2".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode_length must be positive".into()));
        }
        if self.spill_tilt.is_some_and(|t| t <= 0) {
            return Err(Error::Config("spill_tilt must be positive".into()));
        }
        if self.acceleration <= 0 {
            return Err(Error::Config("acceleration must be positive".into()));
        }
        if self.start_position > self.max_position() as usize || self.start_velocity > self.max_velocity() as usize {
            return Err(Error::Config("start region exceeds the table".into()));
        }
        if ![self.c0, self.c1, self.lift_bonus, self.fall_penalty]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(Error::Config("reward parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn max_position(&self) -> i64 {
        (self.position_bins / 2) as i64
    }

    pub fn max_velocity(&self) -> i64 {
        (self.velocity_bins / 2) as i64
    }

    pub fn max_tilt(&self) -> i64 {
        (self.tilt_levels / 2) as i64
    }

    pub fn n_states(&self) -> usize {
        self.position_bins * self.velocity_bins
    }

    pub fn state_index(&self, state: BallState) -> usize {
        let p = (state.position + self.max_position()) as usize;
        let v = (state.velocity + self.max_velocity()) as usize;
        p * self.velocity_bins + v
    }

    pub fn decode(&self, index: usize) -> BallState {
        BallState {
            position: (index / self.velocity_bins) as i64 - self.max_position(),
            velocity: (index % self.velocity_bins) as i64 - self.max_velocity(),
        }
    }

    /// One step of the table dynamics: returns the next state and reward.
    pub fn step(&self, state: BallState, force: [usize; 2]) -> (BallState, f64) {
        let tilt = (force[0] as i64 - force[1] as i64).clamp(-self.max_tilt(), self.max_tilt());
        let velocity = (state.velocity + self.acceleration * tilt).clamp(-self.max_velocity(), self.max_velocity());
        let position = state.position + velocity;
        let spilled = self.spill_tilt.is_some_and(|limit| tilt.abs() >= limit);
        if spilled || position.abs() > self.max_position() {
            return (
                BallState {
                    position: 0,
                    velocity: 0,
                },
                -self.fall_penalty,
            );
        }
        let lift = force[0].min(force[1]) as f64 / (self.force_levels - 1) as f64;
        let reward = self.c0 + self.lift_bonus * lift - self.c1 * position.abs() as f64 / self.max_position() as f64;
        (BallState { position, velocity }, reward)
    }
}

pub fn build_ball_balancing(config: &BallBalanceConfig) -> Result<MultiAgentTabularGame> {
    config.validate()?;
    let n_states = config.n_states();
    let n_force = config.force_levels;
    let mut f = vec![vec![0; n_force * n_force]; n_states];
    let mut reward = vec![vec![0.0; n_force * n_force]; n_states];
    for s in 0..n_states {
        let state = config.decode(s);
        for f0 in 0..n_force {
            for f1 in 0..n_force {
                let j = f0 * n_force + f1;
                let (next, r) = config.step(state, [f0, f1]);
                f[s][j] = config.state_index(next);
                reward[s][j] = r;
            }
        }
    }
    let mut rho = vec![0.0; n_states];
    let mut count = 0usize;
    for (s, slot) in rho.iter_mut().enumerate() {
        let st = config.decode(s);
        if st.position.unsigned_abs() as usize <= config.start_position
            && st.velocity.unsigned_abs() as usize <= config.start_velocity
        {
            *slot = 1.0;
            count += 1;
        }
    }
    rho.iter_mut().for_each(|x| *x /= count as f64);
    MultiAgentTabularGame::new(
        vec![n_force, n_force],
        Transitions::Deterministic(f),
        reward,
        config.gamma,
        rho,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{optimal_deterministic_policy, risk_neutral_evaluation};
    use crate::optimistic::{check_deterministic_nash, NASH_TOLERANCE};

    fn joint(ax: i64, ay: i64) -> usize {
        let idx = |m: i64| GRID_MOVES.iter().position(|&x| x == m).unwrap();
        idx(ax) * 3 + idx(ay)
    }

    #[test]
    fn gridworld_reward_examples() {
        let game = build_gridworld(&GridworldConfig::default()).unwrap();
        let s44 = grid_state(4, 4);
        assert_eq!(game.next_state(s44, joint(0, 0)), Some(s44));
        assert_eq!(game.reward(s44, joint(0, 0)), 5.0);
        let s22 = grid_state(2, 2);
        assert_eq!(game.reward(s22, joint(0, 0)), 10.0);
        assert_eq!(game.next_state(s44, joint(1, 1)), Some(grid_state(1, 1)));
        assert_eq!(game.reward(s44, joint(1, 1)), -10.0);
    }

    #[test]
    fn departure_timing_uses_current_cell() {
        let config = GridworldConfig {
            reward_timing: RewardTiming::OnDeparture,
            ..Default::default()
        };
        let game = build_gridworld(&config).unwrap();
        assert_eq!(game.reward(grid_state(2, 2), joint(1, 1)), 10.0);
        assert_eq!(game.reward(grid_state(4, 4), joint(1, 1)), 5.0);
    }

    #[test]
    fn uniform_partner_row_averages() {
        let r = &GRIDWORLD_REWARD;
        let row4: f64 = r[3].iter().sum::<f64>() / 4.0;
        let row2: f64 = r[1].iter().sum::<f64>() / 4.0;
        assert_eq!(row4, 1.25);
        assert_eq!(row2, -2.5);
        assert!(row4 > row2);
    }

    #[test]
    fn gridworld_moves_are_bijections() {
        let game = build_gridworld(&GridworldConfig::default()).unwrap();
        for j in 0..game.n_joint() {
            let mut seen = [false; 16];
            for s in 0..16 {
                seen[game.next_state(s, j).unwrap()] = true;
            }
            assert!(seen.iter().all(|&b| b));
        }
    }

    #[test]
    fn noisy_gridworld_is_a_valid_kernel() {
        let config = GridworldConfig {
            action_noise: 0.2,
            ..Default::default()
        };
        let game = build_gridworld(&config).unwrap();
        assert!(!game.is_deterministic());
        // Staying at (4,4): both agents keep their move with probability
        // 0.8 + 0.2/3.
        let keep = 0.8 + 0.2 / 3.0;
        if let Transitions::Dense(p) = game.transitions() {
            let s = grid_state(4, 4);
            assert!((p[s][joint(0, 0)][s] - keep * keep).abs() < 1e-12);
        }
    }

    #[test]
    fn stay_at_44_is_nash_and_worse_than_22() {
        let game = build_gridworld(&GridworldConfig::default()).unwrap();
        let to44 = gridworld_transit_policy(&game, (4, 4), Some((3, 3))).unwrap();
        let to22 = optimal_deterministic_policy(&game, 1e-12).unwrap();
        assert_eq!(to22.deterministic_action(0, grid_state(2, 2)), Some(1));
        assert_eq!(to22.deterministic_action(1, grid_state(2, 2)), Some(1));
        let r44 = check_deterministic_nash(&game, &to44, NASH_TOLERANCE).unwrap();
        let r22 = check_deterministic_nash(&game, &to22, NASH_TOLERANCE).unwrap();
        assert!(r44.is_nash, "{r44:?}");
        assert!(r22.is_nash, "{r22:?}");
        assert!(r22.start_value > r44.start_value);
        let v = risk_neutral_evaluation(&game, &to44.to_joint()).unwrap();
        assert!((v.v[grid_state(4, 4)] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn ball_rejects_small_bins() {
        let config = BallBalanceConfig {
            position_bins: 1,
            ..Default::default()
        };
        assert!(matches!(build_ball_balancing(&config), Err(Error::Config(_))));
    }

    #[test]
    fn ball_equal_forces_keep_center() {
        let config = BallBalanceConfig::default();
        let game = build_ball_balancing(&config).unwrap();
        let center = config.state_index(BallState {
            position: 0,
            velocity: 0,
        });
        for f in 0..config.force_levels {
            let j = f * config.force_levels + f;
            assert_eq!(game.next_state(center, j), Some(center));
            let lift = config.lift_bonus * f as f64 / (config.force_levels - 1) as f64;
            assert_eq!(game.reward(center, j), config.c0 + lift);
        }
        let flat = BallBalanceConfig {
            lift_bonus: 0.0,
            ..config
        };
        let (_, r) = flat.step(
            BallState {
                position: 0,
                velocity: 0,
            },
            [2, 2],
        );
        assert_eq!(r, flat.c0);
    }

    #[test]
    fn ball_spills_on_steep_tilt() {
        let config = BallBalanceConfig::default();
        let start = BallState {
            position: 3,
            velocity: 0,
        };
        let (next, r) = config.step(start, [2, 0]);
        assert_eq!(
            next,
            BallState {
                position: 0,
                velocity: 0
            }
        );
        assert_eq!(r, -config.fall_penalty);
        let gentle = config.step(start, [2, 1]);
        assert_eq!(
            gentle.0,
            BallState {
                position: 4,
                velocity: 1
            }
        );
        let no_spill = BallBalanceConfig {
            spill_tilt: None,
            ..config.clone()
        };
        assert_eq!(
            no_spill.step(start, [2, 0]).0,
            BallState {
                position: 5,
                velocity: 2
            }
        );
    }

    #[test]
    fn ball_dynamics_are_mirror_symmetric_and_total() {
        let config = BallBalanceConfig::default();
        let game = build_ball_balancing(&config).unwrap();
        assert!(game.is_deterministic());
        for s in 0..config.n_states() {
            let st = config.decode(s);
            let mirror = BallState {
                position: -st.position,
                velocity: -st.velocity,
            };
            for f0 in 0..config.force_levels {
                for f1 in 0..config.force_levels {
                    let (a, ra) = config.step(st, [f0, f1]);
                    let (b, rb) = config.step(mirror, [f1, f0]);
                    assert_eq!(a.position, -b.position);
                    assert_eq!(a.velocity, -b.velocity);
                    assert_eq!(ra, rb);
                    assert!(game.next_state(s, f0 * config.force_levels + f1).unwrap() < config.n_states());
                }
            }
        }
    }
}
