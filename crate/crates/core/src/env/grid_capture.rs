use std::any::Any;

use serde::{Deserialize, Serialize};

use super::{check_joint_action, EnvSpec, Environment, StepResult};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Agents on a square grid must gather around a static target.
///
/// * Actions: 0 stay, 1 up, 2 down, 3 left, 4 right.
/// * Moves are resolved in agent-index order; a move off the grid or into a
///   cell held by the target or by another agent becomes "stay".
/// * Win: every agent within Chebyshev distance 1 of the target. Pays
///   `win_reward` and terminates; any other step pays `-step_penalty`.
///   Reaching `episode_limit` terminates with `won = false`.
/// * Observation of agent `i` (11 dims): own `(x, y) / (size - 1)`, then the
///   surrounding 3x3 patch row-major from the top-left: -1 off-grid, 1
///   target, 0.5 other agent, 0 empty (centre cell is always 0).
/// * State (`2 * n_agents + 2` dims): every agent's normalized `(x, y)`,
///   then the target's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridCaptureConfig {
    pub size: usize,
    pub n_agents: usize,
    pub episode_limit: usize,
    /// Draw the target uniformly each episode instead of fixing it at the
    /// grid centre.
    pub random_target: bool,
    pub step_penalty: f64,
    pub win_reward: f64,
    /// Default 0.9: at 0.99 the value gap between moving towards the
    /// target and away from it is about one step penalty.
    pub gamma: f64,
}

impl Default for GridCaptureConfig {
    fn default() -> Self {
        GridCaptureConfig {
            size: 7,
            n_agents: 3,
            episode_limit: 30,
            random_target: false,
            step_penalty: 0.01,
            win_reward: 1.0,
            gamma: 0.9,
        }
    }
}

pub const N_ACTIONS: usize = 5;
const MOVES: [(i64, i64); N_ACTIONS] = [(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)];

#[derive(Debug, Clone)]
pub struct GridCapture {
    cfg: GridCaptureConfig,
    spec: EnvSpec,
    agents: Vec<(usize, usize)>,
    target: (usize, usize),
    t: usize,
    done: bool,
}

impl GridCapture {
    pub fn new(cfg: GridCaptureConfig) -> Result<Self> {
        if cfg.size < 3 {
            return Err(Error::Config { path: "env.size".into(), message: "must be >= 3".into() });
        }
        if cfg.n_agents + 1 > cfg.size * cfg.size {
            return Err(Error::Config { path: "env.n_agents".into(), message: "too many agents for grid".into() });
        }
        let spec = EnvSpec {
            n_agents: cfg.n_agents,
            n_actions: N_ACTIONS,
            obs_dim: 11,
            state_dim: 2 * cfg.n_agents + 2,
            episode_limit: cfg.episode_limit,
            gamma: cfg.gamma,
        };
        spec.validate()?;
        let c = cfg.size / 2;
        Ok(GridCapture { agents: vec![(0, 0); cfg.n_agents], target: (c, c), t: 0, done: false, spec, cfg })
    }

    pub fn agent_positions(&self) -> &[(usize, usize)] {
        &self.agents
    }

    pub fn target(&self) -> (usize, usize) {
        self.target
    }

    /// Test hook: place agents and target directly.
    pub fn set_positions(&mut self, agents: &[(usize, usize)], target: (usize, usize)) {
        self.agents = agents.to_vec();
        self.target = target;
        self.t = 0;
        self.done = false;
    }

    fn adjacent(a: (usize, usize), b: (usize, usize)) -> bool {
        a != b && a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1
    }

    pub fn all_adjacent(&self) -> bool {
        self.agents.iter().all(|&p| Self::adjacent(p, self.target))
    }

    /// Observation of `agent` recomputed from a state vector alone.
    pub fn observation_from_state(size: usize, n_agents: usize, state: &[f64], agent: usize) -> Vec<f64> {
        let scale = (size - 1) as f64;
        let cell = |k: usize| ((state[2 * k] * scale).round() as i64, (state[2 * k + 1] * scale).round() as i64);
        let me = cell(agent);
        let target = cell(n_agents);
        let mut obs = vec![state[2 * agent], state[2 * agent + 1]];
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let p = (me.0 + dx, me.1 + dy);
                let v = if (dx, dy) == (0, 0) {
                    0.0
                } else if p.0 < 0 || p.1 < 0 || p.0 >= size as i64 || p.1 >= size as i64 {
                    -1.0
                } else if p == target {
                    1.0
                } else if (0..n_agents).any(|k| k != agent && cell(k) == p) {
                    0.5
                } else {
                    0.0
                };
                obs.push(v);
            }
        }
        obs
    }
}

impl Environment for GridCapture {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut Rng) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = self.cfg.size;
        let c = n / 2;
        self.target = if self.cfg.random_target { (rng.below(n), rng.below(n)) } else { (c, c) };
        let mut cells: Vec<(usize, usize)> =
            (0..n * n).map(|k| (k % n, k / n)).filter(|&p| p != self.target).collect();
        rng.shuffle(&mut cells);
        self.agents = cells[..self.cfg.n_agents].to_vec();
        self.t = 0;
        self.done = false;
        (self.state(), self.observations())
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeTerminated);
        }
        check_joint_action(&self.spec, joint_action)?;
        let n = self.cfg.size as i64;
        for (i, &a) in joint_action.iter().enumerate() {
            let (dx, dy) = MOVES[a];
            let (x, y) = (self.agents[i].0 as i64 + dx, self.agents[i].1 as i64 + dy);
            if x < 0 || y < 0 || x >= n || y >= n {
                continue;
            }
            let dest = (x as usize, y as usize);
            if dest == self.target || self.agents.iter().enumerate().any(|(k, &p)| k != i && p == dest) {
                continue;
            }
            self.agents[i] = dest;
        }
        self.t += 1;
        let won = self.all_adjacent();
        let terminated = won || self.t >= self.spec.episode_limit;
        self.done = terminated;
        let reward = if won { self.cfg.win_reward } else { -self.cfg.step_penalty };
        Ok(StepResult { reward, terminated, won, next_state: self.state(), next_obs: self.observations() })
    }

    fn state(&self) -> Vec<f64> {
        let scale = (self.cfg.size - 1) as f64;
        self.agents
            .iter()
            .chain(std::iter::once(&self.target))
            .flat_map(|&(x, y)| [x as f64 / scale, y as f64 / scale])
            .collect()
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        let s = self.state();
        (0..self.cfg.n_agents).map(|i| Self::observation_from_state(self.cfg.size, self.cfg.n_agents, &s, i)).collect()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::brute_force_value;

    fn env() -> GridCapture {
        GridCapture::new(GridCaptureConfig::default()).unwrap()
    }

    #[test]
    fn reset_places_distinct_cells() {
        let mut e = env();
        let mut rng = Rng::new(0);
        for _ in 0..50 {
            let (s, obs) = e.reset(&mut rng);
            assert_eq!(s.len(), 8);
            assert_eq!(obs.len(), 3);
            assert!(obs.iter().all(|o| o.len() == 11));
            let mut cells = e.agent_positions().to_vec();
            cells.push(e.target());
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), 4);
        }
    }

    #[test]
    fn gathering_wins() {
        let mut e = env();
        e.set_positions(&[(2, 3), (4, 3), (3, 1)], (3, 3));
        // Agent 2 steps down next to the target.
        let r = e.step(&[0, 0, 2]).unwrap();
        assert!(r.won && r.terminated);
        assert_eq!(r.reward, 1.0);
    }

    #[test]
    fn ordinary_step_penalty_and_truncation() {
        let mut e = env();
        e.set_positions(&[(0, 0), (6, 6), (0, 6)], (3, 3));
        for t in 0..30 {
            let r = e.step(&[0, 0, 0]).unwrap();
            assert_eq!(r.reward, -0.01);
            assert!(!r.won);
            assert_eq!(r.terminated, t == 29);
        }
        assert!(matches!(e.step(&[0, 0, 0]), Err(Error::EpisodeTerminated)));
    }

    #[test]
    fn collisions_become_stay() {
        let mut e = env();
        e.set_positions(&[(1, 1), (2, 1), (0, 0)], (3, 3));
        // Agent 0 tries to move right into agent 1; agent 2 tries to leave the grid.
        e.step(&[4, 0, 1]).unwrap();
        assert_eq!(e.agent_positions(), &[(1, 1), (2, 1), (0, 0)]);
        // Moving into the target is blocked too.
        e.set_positions(&[(2, 3), (0, 0), (6, 6)], (3, 3));
        e.step(&[4, 0, 0]).unwrap();
        assert_eq!(e.agent_positions()[0], (2, 3));
    }

    #[test]
    fn observation_is_function_of_state() {
        let mut e = env();
        let mut rng = Rng::new(8);
        for _ in 0..30 {
            let (s, obs) = e.reset(&mut rng);
            for (i, o) in obs.iter().enumerate() {
                assert_eq!(o, &GridCapture::observation_from_state(7, 3, &s, i));
            }
            let r = e.step(&[rng.below(5), rng.below(5), rng.below(5)]).unwrap();
            for (i, o) in r.next_obs.iter().enumerate() {
                assert_eq!(o, &GridCapture::observation_from_state(7, 3, &r.next_state, i));
            }
        }
    }

    #[test]
    fn episode_length_bounded() {
        let mut e = env();
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            e.reset(&mut rng);
            let mut steps = 0;
            loop {
                let r = e.step(&[rng.below(5), rng.below(5), rng.below(5)]).unwrap();
                steps += 1;
                if r.terminated {
                    break;
                }
            }
            assert!(steps <= 30);
        }
    }

    #[test]
    fn brute_force_rejects_multi_step_env() {
        assert!(matches!(brute_force_value(&env()), Err(Error::NotSecretSlots)));
    }
}
