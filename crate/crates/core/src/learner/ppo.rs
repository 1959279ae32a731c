use log::{debug, info};

use super::{diverged, Episode, EpisodeBatch, LearnerConfig, MetricsRow, PpoConfig, Stage1Model, Stage1Output};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::nets::{Critic, NetDims, Noise};
use crate::Adam;
use crate::ParamStore;
use crate::rng::Rng;
use crate::rollout::{centralized, collect_episodes, ActorController};
use crate::tape::Var;
use crate::Tape;
use crate::Tensor;
use crate::variant::Variant;

/// Generalized advantage estimation for one episode. `values` has
/// `len + 1` entries; terminated steps do not bootstrap.
/// Returns `(advantages, returns)` where `returns = advantages + values`.
pub fn gae(rewards: &[f64], values: &[f64], terminated: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let len = rewards.len();
    let mut adv = vec![0.0; len];
    let mut acc = 0.0;
    for t in (0..len).rev() {
        let cont = if terminated[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * cont * values[t + 1] - values[t];
        acc = delta + gamma * lambda * cont * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Per-row clipped surrogate `min(r * A, clip(r, 1 - c, 1 + c) * A)` with
/// `r = exp(logp - logp_old)`.
pub fn clipped_surrogate(tape: &mut Tape<'_>, logp: Var, logp_old: Var, adv: Var, clip: f64) -> Result<Var> {
    let diff = tape.sub(logp, logp_old)?;
    let ratio = tape.exp(diff)?;
    let s1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let s2 = tape.mul(clipped, adv)?;
    tape.minimum(s1, s2)
}

fn critic_values(critic: &Critic, params: &ParamStore, ep: &Episode) -> Result<Vec<f64>> {
    let mut tape = Tape::no_grad(params);
    let s = tape.constant(Tensor::new(&[ep.state.len(), critic.state_dim], ep.state.concat())?);
    let v = critic.forward(&mut tape, s)?;
    Ok(tape.value(v).values().to_vec())
}

/// Advantages and returns laid out `[batch * steps]` like the batch's masks.
pub fn batch_advantages(
    model: &Stage1Model,
    params: &ParamStore,
    episodes: &[&Episode],
    steps: usize,
    cfg: &PpoConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let critic = model.critic().ok_or_else(|| Error::Config { path: "variant".into(), message: "no critic".into() })?;
    let mut adv = vec![0.0; episodes.len() * steps];
    let mut ret = vec![0.0; episodes.len() * steps];
    for (e, ep) in episodes.iter().enumerate() {
        let v = critic_values(critic, params, ep)?;
        let (a, r) = gae(&ep.reward, &v, &ep.terminated, model.spec.gamma, cfg.gae_lambda);
        adv[e * steps..e * steps + ep.len].copy_from_slice(&a);
        ret[e * steps..e * steps + ep.len].copy_from_slice(&r);
    }
    if cfg.normalize_advantages {
        let valid: Vec<usize> = episodes.iter().enumerate().flat_map(|(e, ep)| (0..ep.len).map(move |t| e * steps + t)).collect();
        let n = valid.len() as f64;
        let mean = valid.iter().map(|&i| adv[i]).sum::<f64>() / n;
        let var = valid.iter().map(|&i| (adv[i] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt() + 1e-8;
        for &i in &valid {
            adv[i] = (adv[i] - mean) / sd;
        }
    }
    Ok((adv, ret))
}

/// PPO objective on a padded batch: clipped policy surrogate and entropy
/// bonus averaged over valid agent-steps, plus the critic's squared error
/// averaged over valid steps. Stored message noise is reused so the ratio
/// compares the same messages.
pub fn ppo_loss(
    model: &Stage1Model,
    batch: &EpisodeBatch,
    tape: &mut Tape<'_>,
    adv: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
) -> Result<Var> {
    let (b, steps, n) = (batch.batch, batch.steps, batch.n_agents);
    let critic = model.critic().ok_or_else(|| Error::Config { path: "variant".into(), message: "no critic".into() })?;
    let dz = model.dims.d_z;
    let mut hidden = tape.constant(Tensor::zeros(&[b * n, model.dims.d_h]));
    let mut pol = tape.constant(Tensor::scalar(0.0));
    let mut negent = tape.constant(Tensor::scalar(0.0));
    let mut vloss = tape.constant(Tensor::scalar(0.0));
    for t in 0..steps {
        let local = tape.constant(batch.local_rows(t));
        let state = tape.constant(batch.state_rows(t));
        let noise = if batch.noise_dim > 0 {
            let v = batch.noise_rows(t);
            Noise::Given(Tensor::new(&[v.len() / dz, dz], v)?)
        } else {
            Noise::Mean
        };
        let out = model.step(tape, local, state, hidden, noise)?;
        hidden = out.hidden;
        let lsm = tape.log_softmax(out.out)?;
        let logp = tape.gather_cols(lsm, &batch.action_rows(t))?;
        let old = tape.constant(Tensor::new(&[b * n, 1], batch.logp_rows(t))?);
        let mask = batch.column(&batch.mask, t);
        let a_rows: Vec<f64> = (0..b * n).map(|r| adv[(r / n) * steps + t]).collect();
        let m_rows: Vec<f64> = (0..b * n).map(|r| mask[r / n]).collect();
        let a = tape.constant(Tensor::new(&[b * n, 1], a_rows)?);
        let m = tape.constant(Tensor::new(&[b * n, 1], m_rows)?);
        let surr = clipped_surrogate(tape, logp, old, a, cfg.clip)?;
        let surr = tape.mul(surr, m)?;
        let s = tape.sum(surr)?;
        pol = tape.add(pol, s)?;

        let p = tape.exp(lsm)?;
        let plogp = tape.mul(p, lsm)?;
        let ne = tape.sum_cols(plogp)?;
        let ne = tape.mul(ne, m)?;
        let s = tape.sum(ne)?;
        negent = tape.add(negent, s)?;

        let v = critic.forward(tape, state)?;
        let r = tape.constant(Tensor::new(&[b, 1], (0..b).map(|e| returns[e * steps + t]).collect())?);
        let d = tape.sub(v, r)?;
        let sq = tape.square(d)?;
        let mb = tape.constant(Tensor::new(&[b, 1], mask)?);
        let sq = tape.mul(sq, mb)?;
        let s = tape.sum(sq)?;
        vloss = tape.add(vloss, s)?;
    }
    let steps_valid = batch.valid_steps().max(1.0);
    let agent_steps = steps_valid * n as f64;
    let pol = tape.scale(pol, -1.0 / agent_steps)?;
    let negent = tape.scale(negent, cfg.entropy_coef / agent_steps)?;
    let vloss = tape.scale(vloss, cfg.value_coef / steps_valid)?;
    let l = tape.add(pol, negent)?;
    tape.add(l, vloss)
}

/// Actor-critic stage-1 training (PPO-clip with GAE and a state-value critic).
pub fn train_stage1_ac(variant: Variant, env_cfg: &EnvConfig, dims: &NetDims, cfg: &LearnerConfig, seed: u64) -> Result<Stage1Output> {
    cfg.validate()?;
    if !variant.is_actor_critic() {
        return Err(Error::Config { path: "variant".into(), message: format!("{variant} is trained with the Q-learner") });
    }
    let spec = env_cfg.spec()?;
    let mut env = env_cfg.build()?;
    let root = Rng::new(seed);
    let mut params = ParamStore::new();
    let model = Stage1Model::init(variant, &spec, dims, &mut params, &mut root.split(0));
    let mut rollout_rng = root.split(1);
    let eval_rng = root.split(4);
    let mut adam = Adam::new();
    let mut metrics = Vec::new();
    let (mut episodes, mut env_steps, mut next_eval, mut n_eval) = (0usize, 0usize, 0usize, 0u64);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let pc = &cfg.ppo;

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
                epsilon: 0.0,
            };
            info!("{variant} seed {seed}: {}", row.to_csv());
            metrics.push(row);
            (loss_sum, loss_n) = (0.0, 0);
            next_eval += cfg.eval_interval;
            if episodes >= cfg.total_episodes {
                break;
            }
        }

        let k = pc.episodes_per_update.min(cfg.total_episodes - episodes);
        let eps = {
            let mut ctl = ActorController::new(&model, &params, false, true);
            collect_episodes(env.as_mut(), &mut ctl, k, &mut rollout_rng)?
        };
        episodes += k;
        env_steps += eps.iter().map(|e| e.len).sum::<usize>();
        let refs: Vec<&Episode> = eps.iter().collect();
        let batch = EpisodeBatch::from_episodes(&spec, &refs);
        let (adv, ret) = batch_advantages(&model, &params, &refs, batch.steps, pc)?;
        for _ in 0..pc.epochs {
            let mut tape = Tape::with_params(&params);
            let loss = ppo_loss(&model, &batch, &mut tape, &adv, &ret, pc)?;
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
    }
    Ok(Stage1Output { model, params, metrics })
}
