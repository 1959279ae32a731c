//! Stage 1: end-to-end training of agents, message module and mixer
//! (value decomposition) or critic (actor-critic).

mod buffer;
mod episode;
mod model;
pub mod ppo;
pub mod qlearner;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use buffer::ReplayBuffer;
pub use episode::{Episode, EpisodeBatch};
pub use model::{Head, Stage1Model, StepVars};
pub use ppo::train_stage1_ac;
pub use qlearner::{td_loss, td_targets, train_stage1, TargetNets};

use crate::error::{Error, Result};
use crate::optim::DEFAULT_LR;
use crate::ParamStore;

/// Stage-1 hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub lr: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    /// Target networks are refreshed every this many episodes.
    pub target_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    /// Environment steps over which epsilon decays linearly.
    pub epsilon_anneal_steps: usize,
    pub total_episodes: usize,
    pub n_parallel: usize,
    pub grad_clip: f64,
    /// Episodes between evaluation rows in the metrics file.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Sample messages during greedy evaluation instead of using the mean.
    pub eval_sample_message: bool,
    pub ppo: PpoConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            lr: DEFAULT_LR,
            buffer_size: 5000,
            batch_size: 32,
            target_interval: 200,
            epsilon_start: 1.0,
            epsilon_finish: 0.05,
            epsilon_anneal_steps: 50_000,
            total_episodes: 30_000,
            n_parallel: 8,
            grad_clip: 10.0,
            eval_interval: 1000,
            eval_episodes: 200,
            eval_sample_message: false,
            ppo: PpoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    /// Episodes collected per policy update.
    pub episodes_per_update: usize,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gae_lambda: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 4,
            episodes_per_update: 32,
            normalize_advantages: true,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| Err(Error::Config { path: format!("learner.{path}"), message: message.into() });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        for (p, v) in [
            ("buffer_size", self.buffer_size),
            ("batch_size", self.batch_size),
            ("target_interval", self.target_interval),
            ("n_parallel", self.n_parallel),
            ("eval_interval", self.eval_interval),
            ("ppo.episodes_per_update", self.ppo.episodes_per_update),
        ] {
            if v == 0 {
                return bad(p, "must be >= 1");
            }
        }
        for (p, v) in [("epsilon_start", self.epsilon_start), ("epsilon_finish", self.epsilon_finish)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(p, "must lie in [0, 1]");
            }
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        if !(self.ppo.clip > 0.0 && self.ppo.clip < 1.0) {
            return bad("ppo.clip", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ppo.gae_lambda) {
            return bad("ppo.gae_lambda", "must lie in [0, 1]");
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_finish`.
    pub fn epsilon_at(&self, env_steps: usize) -> f64 {
        if self.epsilon_anneal_steps == 0 {
            return self.epsilon_finish;
        }
        let frac = (env_steps as f64 / self.epsilon_anneal_steps as f64).min(1.0);
        self.epsilon_start + (self.epsilon_finish - self.epsilon_start) * frac
    }
}

/// One line of the stage-1 metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub episodes: usize,
    /// Mean training loss since the previous row (`None` before the first update).
    pub loss: Option<f64>,
    pub eval_win_rate: f64,
    pub eval_return: f64,
    pub epsilon: f64,
}

pub const METRICS_HEADER: &str = "step,episodes,loss,eval_win_rate,eval_return,epsilon";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let loss = self.loss.map(|l| l.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.step, self.episodes, loss, self.eval_win_rate, self.eval_return, self.epsilon)
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

/// Result of a stage-1 run.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub model: Stage1Model,
    pub params: ParamStore,
    pub metrics: Vec<MetricsRow>,
}

impl Stage1Output {
    pub fn final_eval(&self) -> Option<&MetricsRow> {
        self.metrics.last()
    }
}

pub(crate) fn diverged(episodes: usize, loss: f64, params: &ParamStore) -> Error {
    let mut dump = String::new();
    for (name, t) in params.iter() {
        let bad = t.values().iter().filter(|v| !v.is_finite()).count();
        let max = t.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gn = t.grad.as_ref().map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt()).unwrap_or(0.0);
        let _ = writeln!(dump, "  {name}: shape {:?} max|v| {max:.3e} non-finite {bad} grad-norm {gn:.3e}", t.shape());
    }
    Error::Diverged { episodes, loss, dump }
}

#[cfg(test)]
mod tests;
