use log::{debug, info};

use super::{diverged, EpisodeBatch, LearnerConfig, MetricsRow, ReplayBuffer, Stage1Model, Stage1Output};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::nets::{NetDims, Noise};
use crate::Adam;
use crate::ParamStore;
use crate::rng::Rng;
use crate::rollout::{centralized, collect_episodes, QController};
use crate::tape::Var;
use crate::Tape;
use crate::Tensor;
use crate::variant::Variant;

/// Periodically refreshed copies of every stage-1 parameter.
#[derive(Debug, Clone)]
pub struct TargetNets {
    pub params: ParamStore,
}

impl TargetNets {
    pub fn new(online: &ParamStore) -> Self {
        TargetNets { params: online.detached() }
    }

    pub fn refresh(&mut self, online: &ParamStore) -> Result<()> {
        self.params.copy_values_from(online)
    }
}

fn mixer_of(model: &Stage1Model) -> Result<&crate::nets::Mixer> {
    model.mixer().ok_or_else(|| Error::Config {
        path: "variant".into(),
        message: format!("{} has no mixing network", model.variant),
    })
}

/// Bootstrapped targets `y = r + gamma * (1 - terminated) * Q_tot'` as a
/// `[batch * steps]` vector. The next-step maximum is taken per agent and
/// then mixed, which is exact for monotone mixers. Target messages use the
/// distribution mean. Masked entries are 0.
pub fn td_targets(model: &Stage1Model, batch: &EpisodeBatch, targets: &TargetNets, gamma: f64) -> Result<Vec<f64>> {
    let (b, steps, n) = (batch.batch, batch.steps, batch.n_agents);
    let mut y: Vec<f64> = batch.reward.iter().zip(&batch.mask).map(|(r, m)| r * m).collect();
    let bootstrap = gamma > 0.0 && batch.mask.iter().zip(&batch.terminated).any(|(&m, &d)| m > 0.0 && d == 0.0);
    if !bootstrap {
        return Ok(y);
    }
    let mixer = mixer_of(model)?;
    let mut tape = Tape::no_grad(&targets.params);
    let mut hidden = tape.constant(Tensor::zeros(&[b * n, model.dims.d_h]));
    for t in 0..=steps {
        let local = tape.constant(batch.local_rows(t));
        let state = tape.constant(batch.state_rows(t));
        let out = model.step(&mut tape, local, state, hidden, Noise::Mean)?;
        hidden = out.hidden;
        if t == 0 {
            continue;
        }
        let na = batch.n_actions;
        let best: Vec<f64> =
            tape.value(out.out).values().chunks(na).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let q = tape.constant(Tensor::new(&[b, n], best)?);
        let qtot = mixer.forward(&mut tape, q, state)?;
        for e in 0..b {
            let i = e * steps + t - 1;
            if batch.mask[i] > 0.0 && batch.terminated[i] == 0.0 {
                y[i] += gamma * tape.value(qtot).values()[e];
            }
        }
    }
    Ok(y)
}

/// Masked mean squared TD error `sum mask * (y - Q_tot)^2 / sum mask`,
/// recorded on `tape` so gradients reach the agent network, the message
/// module and the mixer. Messages are sampled from `rng`.
pub fn td_loss(model: &Stage1Model, batch: &EpisodeBatch, tape: &mut Tape<'_>, y: &[f64], rng: &mut Rng) -> Result<Var> {
    let (b, steps, n) = (batch.batch, batch.steps, batch.n_agents);
    if y.len() != b * steps {
        return Err(Error::shape("td_loss(targets)", &[&[b * steps], &[y.len()]]));
    }
    let mixer = mixer_of(model)?;
    let mut hidden = tape.constant(Tensor::zeros(&[b * n, model.dims.d_h]));
    let mut total = tape.constant(Tensor::scalar(0.0));
    for t in 0..steps {
        let local = tape.constant(batch.local_rows(t));
        let state = tape.constant(batch.state_rows(t));
        let out = model.step(tape, local, state, hidden, Noise::Sample(&mut *rng))?;
        hidden = out.hidden;
        let chosen = tape.gather_cols(out.out, &batch.action_rows(t))?;
        let chosen = tape.reshape(chosen, &[b, n])?;
        let qtot = mixer.forward(tape, chosen, state)?;
        let yt = tape.constant(Tensor::new(&[b, 1], (0..b).map(|e| y[e * steps + t]).collect())?);
        let mt = tape.constant(Tensor::new(&[b, 1], batch.column(&batch.mask, t))?);
        let d = tape.sub(qtot, yt)?;
        let sq = tape.square(d)?;
        let masked = tape.mul(sq, mt)?;
        let s = tape.sum(masked)?;
        total = tape.add(total, s)?;
    }
    tape.scale(total, 1.0 / batch.valid_steps().max(1.0))
}

/// Value-decomposition stage-1 training: collect, store, sample, TD update,
/// periodic target refresh and evaluation.
pub fn train_stage1(variant: Variant, env_cfg: &EnvConfig, dims: &NetDims, cfg: &LearnerConfig, seed: u64) -> Result<Stage1Output> {
    cfg.validate()?;
    if variant.is_actor_critic() {
        return Err(Error::Config { path: "variant".into(), message: format!("{variant} is trained with the actor-critic learner") });
    }
    let spec = env_cfg.spec()?;
    let mut env = env_cfg.build()?;
    let root = Rng::new(seed);
    let mut params = ParamStore::new();
    let model = Stage1Model::init(variant, &spec, dims, &mut params, &mut root.split(0));
    let mut rollout_rng = root.split(1);
    let mut sample_rng = root.split(2);
    let mut noise_rng = root.split(3);
    let eval_rng = root.split(4);

    let mut targets = TargetNets::new(&params);
    let mut buffer = ReplayBuffer::new(cfg.buffer_size);
    let mut adam = Adam::new();
    let mut metrics = Vec::new();
    let (mut episodes, mut env_steps, mut last_refresh, mut next_eval, mut n_eval) = (0usize, 0usize, 0usize, 0usize, 0u64);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);

    loop {
        if episodes >= next_eval || episodes >= cfg.total_episodes {
            let mut ctl = centralized(&model, &params, cfg.eval_sample_message);
            let r = evaluate(env.as_mut(), ctl.as_mut(), cfg.eval_episodes, &mut eval_rng.split(n_eval))?;
            n_eval += 1;
            let row = MetricsRow {
                step: env_steps,
                episodes,
                loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
                eval_win_rate: r.win_rate,
                eval_return: r.mean_return,
                epsilon: cfg.epsilon_at(env_steps),
            };
            info!("{variant} seed {seed}: {}", row.to_csv());
            metrics.push(row);
            (loss_sum, loss_n) = (0.0, 0);
            next_eval += cfg.eval_interval;
            if episodes >= cfg.total_episodes {
                break;
            }
        }

        let epsilon = cfg.epsilon_at(env_steps);
        let k = cfg.n_parallel.min(cfg.total_episodes - episodes);
        let new = {
            let mut ctl = QController::new(&model, &params, epsilon, true);
            collect_episodes(env.as_mut(), &mut ctl, k, &mut rollout_rng)?
        };
        for ep in new {
            env_steps += ep.len;
            buffer.insert(ep);
        }
        episodes += k;

        if buffer.len() >= cfg.batch_size {
            let sampled = buffer.sample(cfg.batch_size, &mut sample_rng);
            let batch = EpisodeBatch::from_episodes(&spec, &sampled);
            let y = td_targets(&model, &batch, &targets, spec.gamma)?;
            let mut tape = Tape::with_params(&params);
            let loss = td_loss(&model, &batch, &mut tape, &y, &mut noise_rng)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(diverged(episodes, lv, &params));
            }
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&mut params)?;
            let gn = params.clip_grad_norm(cfg.grad_clip);
            if !gn.is_finite() {
                return Err(diverged(episodes, lv, &params));
            }
            adam.step(&mut params, cfg.lr)?;
            loss_sum += lv;
            loss_n += 1;
            debug!("episodes {episodes} loss {lv:.5} grad-norm {gn:.3}");
        }

        if episodes - last_refresh >= cfg.target_interval {
            targets.refresh(&params)?;
            last_refresh = episodes;
        }
    }
    Ok(Stage1Output { model, params, metrics })
}
