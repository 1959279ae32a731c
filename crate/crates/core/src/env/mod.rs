//! Cooperative Dec-POMDP environments: global state, per-agent observations,
//! one shared reward per step, and a win flag.

pub mod grid_capture;
pub mod secret_slots;

use std::any::Any;

use serde::{Deserialize, Serialize};

pub use grid_capture::{GridCapture, GridCaptureConfig};
pub use secret_slots::{SecretSlots, SecretSlotsConfig};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub episode_limit: usize,
    pub gamma: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_agents", self.n_agents),
            ("n_actions", self.n_actions),
            ("obs_dim", self.obs_dim),
            ("state_dim", self.state_dim),
            ("episode_limit", self.episode_limit),
        ];
        for (path, v) in dims {
            if v == 0 {
                return Err(Error::Config { path: format!("env.{path}"), message: "must be >= 1".into() });
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config { path: "env.gamma".into(), message: "must lie in [0, 1)".into() });
        }
        Ok(())
    }

    /// Width of the per-agent local-information vector
    /// (observation, last-action one-hot, agent-id one-hot).
    pub fn local_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Shared team reward.
    pub reward: f64,
    pub terminated: bool,
    pub won: bool,
    pub next_state: Vec<f64>,
    pub next_obs: Vec<Vec<f64>>,
}

/// A cooperative environment. All actions are always available.
pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a fresh episode and returns `(state, observations)`.
    fn reset(&mut self, rng: &mut Rng) -> (Vec<f64>, Vec<Vec<f64>>);

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult>;

    fn state(&self) -> Vec<f64>;

    fn observations(&self) -> Vec<Vec<f64>>;

    fn as_any(&self) -> &dyn Any;
}

pub(crate) fn check_joint_action(spec: &EnvSpec, joint_action: &[usize]) -> Result<()> {
    if joint_action.len() != spec.n_agents {
        return Err(Error::JointActionLength { expected: spec.n_agents, got: joint_action.len() });
    }
    for (agent, &action) in joint_action.iter().enumerate() {
        if action >= spec.n_actions {
            return Err(Error::InvalidAction { agent, action, n_actions: spec.n_actions });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    SecretSlots(SecretSlotsConfig),
    GridCapture(GridCaptureConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::SecretSlots(SecretSlotsConfig::default())
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::SecretSlots(c) => Box::new(SecretSlots::new(c.clone())?),
            EnvConfig::GridCapture(c) => Box::new(GridCapture::new(c.clone())?),
        })
    }

    pub fn spec(&self) -> Result<EnvSpec> {
        Ok(self.build()?.spec().clone())
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::SecretSlots(_) => "secret_slots",
            EnvConfig::GridCapture(_) => "grid_capture",
        }
    }
}

/// Exact optimal reward of a SecretSlots instance in its current state,
/// by enumerating every joint action.
pub fn brute_force_value(env: &dyn Environment) -> Result<f64> {
    let slots = env.as_any().downcast_ref::<SecretSlots>().ok_or(Error::NotSecretSlots)?;
    let spec = slots.spec();
    let mut best = f64::NEG_INFINITY;
    for joint in joint_actions(spec.n_agents, spec.n_actions) {
        best = best.max(slots.reward_of(&joint)?);
    }
    Ok(best)
}

/// All `n_actions^n_agents` joint actions in lexicographic order.
pub fn joint_actions(n_agents: usize, n_actions: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = n_actions.pow(n_agents as u32);
    (0..total).map(move |mut k| {
        let mut joint = vec![0; n_agents];
        for slot in joint.iter_mut().rev() {
            *slot = k % n_actions;
            k /= n_actions;
        }
        joint
    })
}
