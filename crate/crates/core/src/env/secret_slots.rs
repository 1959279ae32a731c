use std::any::Any;

use serde::{Deserialize, Serialize};

use super::{check_joint_action, EnvSpec, Environment, StepResult};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Single-step diagnostic game. Each agent has a secret goal action that is
/// only written into the global state; observations are all-zero. The team
/// reward is the fraction of agents that pick their own goal, and the
/// episode is won only when every agent does.
///
/// State layout: `n_agents` one-hot goal blocks of width `n_actions`,
/// followed by `noise_dims` uniform `[0, 1)` distractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecretSlotsConfig {
    pub n_agents: usize,
    pub n_actions: usize,
    pub noise_dims: usize,
    pub obs_dim: usize,
    pub gamma: f64,
}

impl Default for SecretSlotsConfig {
    fn default() -> Self {
        SecretSlotsConfig { n_agents: 3, n_actions: 5, noise_dims: 10, obs_dim: 4, gamma: 0.99 }
    }
}

#[derive(Debug, Clone)]
pub struct SecretSlots {
    spec: EnvSpec,
    noise_dims: usize,
    goals: Vec<usize>,
    noise: Vec<f64>,
    done: bool,
}

impl SecretSlots {
    pub fn new(cfg: SecretSlotsConfig) -> Result<Self> {
        let spec = EnvSpec {
            n_agents: cfg.n_agents,
            n_actions: cfg.n_actions,
            obs_dim: cfg.obs_dim,
            state_dim: cfg.n_agents * cfg.n_actions + cfg.noise_dims,
            episode_limit: 1,
            gamma: cfg.gamma,
        };
        spec.validate()?;
        Ok(SecretSlots {
            goals: vec![0; cfg.n_agents],
            noise: vec![0.0; cfg.noise_dims],
            noise_dims: cfg.noise_dims,
            spec,
            done: false,
        })
    }

    pub fn goals(&self) -> &[usize] {
        &self.goals
    }

    /// Decodes the goal of `agent` from a state vector.
    pub fn goal_from_state(spec: &EnvSpec, state: &[f64], agent: usize) -> usize {
        let block = &state[agent * spec.n_actions..(agent + 1) * spec.n_actions];
        block.iter().position(|&v| v == 1.0).unwrap_or(0)
    }

    /// Reward the current state would pay for `joint`, without stepping.
    pub fn reward_of(&self, joint: &[usize]) -> Result<f64> {
        check_joint_action(&self.spec, joint)?;
        let correct = joint.iter().zip(&self.goals).filter(|(a, g)| a == g).count();
        Ok(correct as f64 / self.spec.n_agents as f64)
    }
}

impl Environment for SecretSlots {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut Rng) -> (Vec<f64>, Vec<Vec<f64>>) {
        for g in self.goals.iter_mut() {
            *g = rng.below(self.spec.n_actions);
        }
        for v in self.noise.iter_mut() {
            *v = rng.uniform();
        }
        self.done = false;
        (self.state(), self.observations())
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeTerminated);
        }
        let reward = self.reward_of(joint_action)?;
        self.done = true;
        Ok(StepResult {
            reward,
            terminated: true,
            won: joint_action == self.goals.as_slice(),
            next_state: self.state(),
            next_obs: self.observations(),
        })
    }

    fn state(&self) -> Vec<f64> {
        let a = self.spec.n_actions;
        let mut s = vec![0.0; self.spec.n_agents * a + self.noise_dims];
        for (i, &g) in self.goals.iter().enumerate() {
            s[i * a + g] = 1.0;
        }
        s[self.spec.n_agents * a..].copy_from_slice(&self.noise);
        s
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.spec.obs_dim]; self.spec.n_agents]
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
