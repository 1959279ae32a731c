//! Episode execution shared by training rollouts and evaluation.

use crate::env::Environment;
use crate::error::Result;
use crate::learner::{Episode, Stage1Model};
use crate::nets::{LocalInfo, Noise};
use crate::ParamStore;
use crate::rng::Rng;
use crate::Tape;
use crate::Tensor;

/// A controller's choice for one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decision {
    pub actions: Vec<usize>,
    /// Message noise used for this step, if recorded.
    pub noise: Vec<f64>,
    /// Log-probability of each chosen action, if the controller is stochastic.
    pub logp: Vec<f64>,
}

impl Decision {
    pub fn actions(actions: Vec<usize>) -> Self {
        Decision { actions, ..Decision::default() }
    }
}

/// Anything that picks a joint action each step. Centralized controllers may
/// read `state`; decentralized ones ignore it.
pub trait Controller {
    fn begin_episode(&mut self);
    fn act(&mut self, state: &[f64], locals: &[LocalInfo], rng: &mut Rng) -> Result<Decision>;
}

/// Runs one episode to termination. `rng` drives both the reset and the
/// controller.
pub fn run_episode(env: &mut dyn Environment, ctl: &mut dyn Controller, rng: &mut Rng) -> Result<Episode> {
    let spec = env.spec().clone();
    let (state, obs) = env.reset(rng);
    ctl.begin_episode();
    let mut ep = Episode {
        len: 0,
        obs: vec![obs.concat()],
        state: vec![state],
        actions: Vec::new(),
        reward: Vec::new(),
        terminated: Vec::new(),
        won: false,
        noise: Vec::new(),
        logp: Vec::new(),
    };
    let mut obs = obs;
    let mut last: Option<Vec<usize>> = None;
    loop {
        let locals: Vec<LocalInfo> = (0..spec.n_agents)
            .map(|i| LocalInfo::new(obs[i].clone(), last.as_ref().map(|a| a[i]), spec.n_actions, i, spec.n_agents))
            .collect();
        let d = ctl.act(ep.state.last().expect("state"), &locals, rng)?;
        let r = env.step(&d.actions)?;
        ep.len += 1;
        ep.actions.push(d.actions.clone());
        ep.reward.push(r.reward);
        ep.terminated.push(r.terminated);
        if !d.noise.is_empty() {
            ep.noise.push(d.noise);
        }
        if !d.logp.is_empty() {
            ep.logp.push(d.logp);
        }
        ep.obs.push(r.next_obs.concat());
        ep.state.push(r.next_state);
        obs = r.next_obs;
        last = Some(d.actions);
        if r.terminated {
            ep.won = r.won;
            return Ok(ep);
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn local_tensor(locals: &[LocalInfo]) -> Tensor {
    let mut v = Vec::new();
    for l in locals {
        l.write_into(&mut v);
    }
    Tensor::new(&[locals.len(), locals[0].dim()], v).expect("shape")
}

/// Centralized stage-1 policy for value-decomposition variants:
/// epsilon-greedy over the agent network's Q-values.
pub struct QController<'a> {
    pub model: &'a Stage1Model,
    pub params: &'a ParamStore,
    pub epsilon: f64,
    /// Sample messages (`z = mu + sigma * eps`) instead of using `mu`.
    pub sample_message: bool,
    hidden: Tensor,
}

impl<'a> QController<'a> {
    pub fn new(model: &'a Stage1Model, params: &'a ParamStore, epsilon: f64, sample_message: bool) -> Self {
        let hidden = Tensor::zeros(&[model.n_agents(), model.dims.d_h]);
        QController { model, params, epsilon, sample_message, hidden }
    }
}

impl Controller for QController<'_> {
    fn begin_episode(&mut self) {
        self.hidden = Tensor::zeros(&[self.model.n_agents(), self.model.dims.d_h]);
    }

    fn act(&mut self, state: &[f64], locals: &[LocalInfo], rng: &mut Rng) -> Result<Decision> {
        let mut tape = Tape::no_grad(self.params);
        let l = tape.constant(local_tensor(locals));
        let s = tape.constant(Tensor::row(state.to_vec()));
        let h = tape.constant(self.hidden.clone());
        let noise = if self.sample_message { Noise::Sample(&mut *rng) } else { Noise::Mean };
        let out = self.model.step(&mut tape, l, s, h, noise)?;
        self.hidden = tape.value(out.hidden).clone();
        let na = self.model.spec.n_actions;
        let q = tape.value(out.out).values();
        let actions = q
            .chunks(na)
            .map(|row| {
                let explore = rng.uniform() < self.epsilon;
                let random = rng.below(na);
                if explore {
                    random
                } else {
                    argmax(row)
                }
            })
            .collect();
        Ok(Decision::actions(actions))
    }
}

/// Centralized stage-1 actor: samples from (or takes the mode of) the
/// softmax policy and records the noise and log-probabilities PPO needs.
pub struct ActorController<'a> {
    pub model: &'a Stage1Model,
    pub params: &'a ParamStore,
    pub greedy: bool,
    pub sample_message: bool,
    hidden: Tensor,
}

impl<'a> ActorController<'a> {
    pub fn new(model: &'a Stage1Model, params: &'a ParamStore, greedy: bool, sample_message: bool) -> Self {
        let hidden = Tensor::zeros(&[model.n_agents(), model.dims.d_h]);
        ActorController { model, params, greedy, sample_message, hidden }
    }
}

impl Controller for ActorController<'_> {
    fn begin_episode(&mut self) {
        self.hidden = Tensor::zeros(&[self.model.n_agents(), self.model.dims.d_h]);
    }

    fn act(&mut self, state: &[f64], locals: &[LocalInfo], rng: &mut Rng) -> Result<Decision> {
        let mut tape = Tape::no_grad(self.params);
        let l = tape.constant(local_tensor(locals));
        let s = tape.constant(Tensor::row(state.to_vec()));
        let h = tape.constant(self.hidden.clone());
        let noise = if self.sample_message { Noise::Sample(&mut *rng) } else { Noise::Mean };
        let out = self.model.step(&mut tape, l, s, h, noise)?;
        self.hidden = tape.value(out.hidden).clone();
        let noise = match out.message.as_ref().and_then(|m| m.eps.as_ref()) {
            Some(e) => e.values().to_vec(),
            None => vec![0.0; self.model.noise_dim()],
        };
        let lsm = tape.log_softmax(out.out)?;
        let na = self.model.spec.n_actions;
        let mut actions = Vec::with_capacity(locals.len());
        let mut logp = Vec::with_capacity(locals.len());
        for row in tape.value(lsm).values().chunks(na) {
            let a = if self.greedy {
                argmax(row)
            } else {
                let probs: Vec<f64> = row.iter().map(|x| x.exp()).collect();
                rng.categorical(&probs)
            };
            actions.push(a);
            logp.push(row[a]);
        }
        Ok(Decision { actions, noise, logp })
    }
}

/// Centralized greedy controller for any stage-1 model, with messages at
/// their mean unless `sample_message` is set.
pub fn centralized<'a>(model: &'a Stage1Model, params: &'a ParamStore, sample_message: bool) -> Box<dyn Controller + 'a> {
    if model.variant.is_actor_critic() {
        Box::new(ActorController::new(model, params, true, sample_message))
    } else {
        Box::new(QController::new(model, params, 0.0, sample_message))
    }
}

/// Collects `n` episodes, each on its own rng stream seeded from `rng`.
pub fn collect_episodes(env: &mut dyn Environment, ctl: &mut dyn Controller, n: usize, rng: &mut Rng) -> Result<Vec<Episode>> {
    (0..n)
        .map(|_| {
            let mut ep_rng = Rng::new(rng.next_u64());
            run_episode(env, ctl, &mut ep_rng)
        })
        .collect()
}
