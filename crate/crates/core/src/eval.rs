//! Greedy evaluation and the performance retention ratio.

use crate::env::secret_slots::SecretSlots;
use crate::env::{EnvSpec, Environment};
use crate::error::Result;
use crate::nets::LocalInfo;
use crate::rng::Rng;
use crate::rollout::{collect_episodes, Controller, Decision};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub win_rate: f64,
    pub mean_return: f64,
    pub episodes: usize,
}

/// Runs `episodes` fresh episodes and reports the fraction won and the mean
/// undiscounted return.
pub fn evaluate(env: &mut dyn Environment, ctl: &mut dyn Controller, episodes: usize, rng: &mut Rng) -> Result<EvalResult> {
    let eps = collect_episodes(env, ctl, episodes, rng)?;
    let n = eps.len().max(1) as f64;
    let wins = eps.iter().filter(|e| e.won).count() as f64;
    let ret: f64 = eps.iter().map(|e| e.episode_return()).sum();
    Ok(EvalResult { win_rate: wins / n, mean_return: ret / n, episodes })
}

/// Decentralized over centralized win rate. `None` when the centralized win
/// rate is zero (reported as N/A).
pub fn compute_prr(win_decentralized: f64, win_centralized: f64) -> Option<f64> {
    if win_centralized > 0.0 {
        Some(win_decentralized / win_centralized)
    } else {
        None
    }
}

/// Uniformly random joint actions.
pub struct RandomController {
    pub n_actions: usize,
}

impl Controller for RandomController {
    fn begin_episode(&mut self) {}

    fn act(&mut self, _state: &[f64], locals: &[LocalInfo], rng: &mut Rng) -> Result<Decision> {
        Ok(Decision::actions(locals.iter().map(|_| rng.below(self.n_actions)).collect()))
    }
}

/// Reads every agent's goal straight from the SecretSlots state.
pub struct SecretSlotsOracle {
    pub spec: EnvSpec,
}

impl Controller for SecretSlotsOracle {
    fn begin_episode(&mut self) {}

    fn act(&mut self, state: &[f64], _locals: &[LocalInfo], _rng: &mut Rng) -> Result<Decision> {
        Ok(Decision::actions((0..self.spec.n_agents).map(|i| SecretSlots::goal_from_state(&self.spec, state, i)).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::secret_slots::SecretSlotsConfig;

    #[test]
    fn prr_identity_and_scale() {
        assert_eq!(compute_prr(0.37, 0.37), Some(1.0));
        assert_eq!(compute_prr(0.5, 0.0), None);
        for k in [0.1, 2.0, 7.5] {
            let a = compute_prr(0.6 * k, 0.8 * k).unwrap();
            assert!((a - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_always_wins() {
        let cfg = SecretSlotsConfig::default();
        let mut env = SecretSlots::new(cfg).unwrap();
        let mut ctl = SecretSlotsOracle { spec: env.spec().clone() };
        let r = evaluate(&mut env, &mut ctl, 200, &mut Rng::new(3)).unwrap();
        assert_eq!(r.win_rate, 1.0);
        assert_eq!(r.mean_return, 1.0);
    }

    #[test]
    fn random_policy_matches_binomial() {
        let cfg = SecretSlotsConfig::default();
        let mut env = SecretSlots::new(cfg.clone()).unwrap();
        let mut ctl = RandomController { n_actions: cfg.n_actions };
        let n = 20_000;
        let r = evaluate(&mut env, &mut ctl, n, &mut Rng::new(4)).unwrap();
        let p: f64 = 0.008;
        assert!((r.win_rate - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "{}", r.win_rate);
        assert!((r.mean_return - 0.2).abs() < 0.01);
    }
}
