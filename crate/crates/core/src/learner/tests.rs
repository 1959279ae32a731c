use super::ppo::{clipped_surrogate, gae, ppo_loss};
use super::*;
use crate::env::secret_slots::SecretSlotsConfig;
use crate::env::{joint_actions, EnvConfig, EnvSpec};
use crate::nets::{AgentHidden, LocalInfo, MessageModule, NetDims, Noise};
use crate::rng::Rng;
use crate::rollout::{collect_episodes, QController};
use crate::{ParamStore, Tape, Tensor, Variant};

fn small_dims() -> NetDims {
    NetDims { d_h: 16, d_g: 8, d_z: 4, mix_embed: 8, hyper_hidden: 16, critic_hidden: 16, ..NetDims::default() }
}

fn spec(n: usize, a: usize) -> EnvSpec {
    EnvSpec { n_agents: n, n_actions: a, obs_dim: 4, state_dim: 5, episode_limit: 4, gamma: 0.9 }
}

fn random_episode(spec: &EnvSpec, len: usize, rng: &mut Rng) -> Episode {
    let n = spec.n_agents;
    Episode {
        len,
        obs: (0..=len).map(|_| (0..n * spec.obs_dim).map(|_| rng.normal()).collect()).collect(),
        state: (0..=len).map(|_| (0..spec.state_dim).map(|_| rng.normal()).collect()).collect(),
        actions: (0..len).map(|_| (0..n).map(|_| rng.below(spec.n_actions)).collect()).collect(),
        reward: (0..len).map(|_| rng.normal()).collect(),
        terminated: (0..len).map(|t| t + 1 == len && rng.uniform() < 0.5).collect(),
        won: false,
        noise: vec![],
        logp: vec![],
    }
}

fn model(variant: Variant, spec: &EnvSpec, seed: u64) -> (Stage1Model, ParamStore) {
    let mut p = ParamStore::new();
    let m = Stage1Model::init(variant, spec, &small_dims(), &mut p, &mut Rng::new(seed));
    (m, p)
}

fn loss_bits(m: &Stage1Model, p: &ParamStore, batch: &EpisodeBatch, targets: &TargetNets) -> u64 {
    let y = td_targets(m, batch, targets, m.spec.gamma).unwrap();
    let mut tape = Tape::with_params(p);
    let l = td_loss(m, batch, &mut tape, &y, &mut Rng::new(99)).unwrap();
    tape.value(l).item().to_bits()
}

#[test]
fn batch_mask_is_monotone_and_padding_zero() {
    let sp = spec(3, 5);
    let mut rng = Rng::new(0);
    let eps: Vec<Episode> = [1, 4, 2].iter().map(|&l| random_episode(&sp, l, &mut rng)).collect();
    let refs: Vec<&Episode> = eps.iter().collect();
    let b = EpisodeBatch::from_episodes(&sp, &refs);
    assert_eq!(b.steps, 4);
    for e in 0..3 {
        let m = &b.mask[e * 4..(e + 1) * 4];
        assert!(m.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(m.iter().sum::<f64>() as usize, eps[e].len);
        for t in 0..4 {
            if m[t] == 0.0 {
                assert_eq!(b.reward[e * 4 + t], 0.0);
            }
        }
    }
}

#[test]
fn local_rows_carry_previous_action_and_index() {
    let sp = spec(2, 3);
    let mut rng = Rng::new(1);
    let ep = random_episode(&sp, 3, &mut rng);
    let b = EpisodeBatch::from_episodes(&sp, &[&ep]);
    let rows = b.local_rows(2);
    for i in 0..2 {
        let expect = LocalInfo::new(ep.obs[2][i * 4..(i + 1) * 4].to_vec(), Some(ep.actions[1][i]), 3, i, 2).to_vec();
        assert_eq!(&rows.values()[i * 9..(i + 1) * 9], expect.as_slice());
    }
    let first = b.local_rows(0);
    assert!(first.values()[4..7].iter().all(|&v| v == 0.0));
}

#[test]
fn masking_invariance_of_td_loss() {
    let sp = spec(3, 4);
    let mut rng = Rng::new(2);
    for trial in 0..50 {
        let variant = [Variant::QmixSgi, Variant::VdnUgi, Variant::Qmix][trial % 3];
        let (m, p) = model(variant, &sp, trial as u64);
        let targets = TargetNets::new(&p);
        let eps: Vec<Episode> = (0..4).map(|_| random_episode(&sp, 1 + rng.below(4), &mut rng)).collect();
        let refs: Vec<&Episode> = eps.iter().collect();
        let batch = EpisodeBatch::from_episodes(&sp, &refs);
        let base = loss_bits(&m, &p, &batch, &targets);
        let mut mutated = batch.clone();
        let (n, od, sd, steps) = (sp.n_agents, sp.obs_dim, sp.state_dim, batch.steps);
        for (e, ep) in eps.iter().enumerate() {
            for t in ep.len + 1..=steps {
                let o = (e * (steps + 1) + t) * n * od;
                mutated.obs[o..o + n * od].iter_mut().for_each(|v| *v = rng.normal() * 5.0);
                let s = (e * (steps + 1) + t) * sd;
                mutated.state[s..s + sd].iter_mut().for_each(|v| *v = rng.normal() * 5.0);
            }
            for t in ep.len..steps {
                let i = e * steps + t;
                mutated.reward[i] = rng.normal() * 5.0;
                mutated.terminated[i] = rng.below(2) as f64;
                mutated.actions[i * n..(i + 1) * n].iter_mut().for_each(|a| *a = rng.below(sp.n_actions));
            }
        }
        assert_eq!(base, loss_bits(&m, &p, &mutated, &targets), "trial {trial}");
    }
}

#[test]
fn terminal_and_undiscounted_targets_equal_reward() {
    let sp = spec(2, 3);
    let (m, p) = model(Variant::QmixSgi, &sp, 3);
    let targets = TargetNets::new(&p);
    let mut rng = Rng::new(4);
    let mut ep = random_episode(&sp, 1, &mut rng);
    ep.reward = vec![1.0];
    ep.terminated = vec![true];
    let b = EpisodeBatch::from_episodes(&sp, &[&ep]);
    assert_eq!(td_targets(&m, &b, &targets, 0.9).unwrap(), vec![1.0]);
    let eps: Vec<Episode> = (0..3).map(|_| random_episode(&sp, 3, &mut rng)).collect();
    let refs: Vec<&Episode> = eps.iter().collect();
    let b = EpisodeBatch::from_episodes(&sp, &refs);
    let y = td_targets(&m, &b, &targets, 0.0).unwrap();
    let r: Vec<f64> = b.reward.iter().zip(&b.mask).map(|(r, m)| r * m).collect();
    assert_eq!(y, r);
}

#[test]
fn bootstrap_matches_joint_enumeration() {
    let sp = spec(2, 3);
    for variant in [Variant::QmixSgi, Variant::VdnSgi, Variant::QmixUgi] {
        let (m, p) = model(variant, &sp, 5);
        let targets = TargetNets::new(&p);
        let mut rng = Rng::new(6);
        let mut ep = random_episode(&sp, 2, &mut rng);
        ep.terminated = vec![false, true];
        let b = EpisodeBatch::from_episodes(&sp, &[&ep]);
        let y = td_targets(&m, &b, &targets, sp.gamma).unwrap();

        // Per-agent values at t = 1, replayed one agent at a time.
        let mut q1 = Vec::new();
        for i in 0..2 {
            let l0 = LocalInfo::new(ep.obs[0][i * 4..(i + 1) * 4].to_vec(), None, 3, i, 2);
            let l1 = LocalInfo::new(ep.obs[1][i * 4..(i + 1) * 4].to_vec(), Some(ep.actions[0][i]), 3, i, 2);
            let msg = |l: &LocalInfo, s: &[f64]| -> Option<Vec<f64>> {
                match &m.message {
                    MessageModule::None => None,
                    MessageModule::Unified(g) => Some(g.forward_one(&p, s, Noise::Mean).unwrap().z),
                    MessageModule::Specialized(g) => Some(g.forward_one(&p, l, s, Noise::Mean).unwrap().z),
                }
            };
            let h0 = AgentHidden::zeros(16);
            let (_, h1) = m.agent.forward_one(&p, &l0, &h0, msg(&l0, &ep.state[0]).as_deref()).unwrap();
            let (q, _) = m.agent.forward_one(&p, &l1, &h1, msg(&l1, &ep.state[1]).as_deref()).unwrap();
            q1.push(q);
        }
        let best = joint_actions(2, 3)
            .map(|u| m.mixer().unwrap().mix_one(&p, &[q1[0][u[0]], q1[1][u[1]]], &ep.state[1]).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((y[0] - (ep.reward[0] + sp.gamma * best)).abs() < 1e-10, "{variant}");
        assert_eq!(y[1], ep.reward[1]);
    }
}

#[test]
fn perfect_values_give_zero_loss_and_all_masked_zero_grads() {
    let sp = spec(2, 3);
    let (m, p) = model(Variant::VdnSgi, &sp, 7);
    let mut rng = Rng::new(8);
    let eps: Vec<Episode> = (0..3).map(|_| random_episode(&sp, 2, &mut rng)).collect();
    let refs: Vec<&Episode> = eps.iter().collect();
    let mut b = EpisodeBatch::from_episodes(&sp, &refs);
    // Q_tot of the online pass with the same noise stream, used as target.
    let y0 = vec![0.0; b.batch * b.steps];
    let mut tape = Tape::with_params(&p);
    let _ = td_loss(&m, &b, &mut tape, &y0, &mut Rng::new(1)).unwrap();
    let mut q = Vec::new();
    {
        let mut tape = Tape::no_grad(&p);
        let mut nrng = Rng::new(1);
        let mut h = tape.constant(Tensor::zeros(&[b.batch * 2, 16]));
        for t in 0..b.steps {
            let l = tape.constant(b.local_rows(t));
            let s = tape.constant(b.state_rows(t));
            let out = m.step(&mut tape, l, s, h, Noise::Sample(&mut nrng)).unwrap();
            h = out.hidden;
            let c = tape.gather_cols(out.out, &b.action_rows(t)).unwrap();
            let c = tape.reshape(c, &[b.batch, 2]).unwrap();
            let tot = tape.sum_cols(c).unwrap();
            q.push(tape.value(tot).values().to_vec());
        }
    }
    let y: Vec<f64> = (0..b.batch).flat_map(|e| (0..b.steps).map(|t| q[t][e]).collect::<Vec<_>>()).collect();
    let mut tape = Tape::with_params(&p);
    let l = td_loss(&m, &b, &mut tape, &y, &mut Rng::new(1)).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    b.mask.iter_mut().for_each(|v| *v = 0.0);
    let mut tape = Tape::with_params(&p);
    let l = td_loss(&m, &b, &mut tape, &y, &mut Rng::new(1)).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let g = tape.backward(l).unwrap();
    for name in p.names() {
        assert!(g.param(name).unwrap().iter().all(|&v| v == 0.0), "{name}");
    }
}

#[test]
fn teacher_receives_gradient_in_stage_one() {
    let sp = spec(3, 4);
    let mut rng = Rng::new(9);
    for variant in [Variant::QmixSgi, Variant::VdnSgi] {
        let (m, mut p) = model(variant, &sp, 10);
        let targets = TargetNets::new(&p);
        let eps: Vec<Episode> = (0..4).map(|_| random_episode(&sp, 3, &mut rng)).collect();
        let refs: Vec<&Episode> = eps.iter().collect();
        let b = EpisodeBatch::from_episodes(&sp, &refs);
        let y = td_targets(&m, &b, &targets, sp.gamma).unwrap();
        let mut tape = Tape::with_params(&p);
        let l = td_loss(&m, &b, &mut tape, &y, &mut rng).unwrap();
        tape.backward(l).unwrap().accumulate_into(&mut p).unwrap();
        assert!(p.grad_norm_prefix("gis.hyper") > 0.0);
        assert!(p.grad_norm_prefix("gis.dg") > 0.0);
    }
}

#[test]
fn target_refresh_is_bitwise_copy() {
    let sp = spec(3, 4);
    let (_, mut p) = model(Variant::QmixSgi, &sp, 11);
    let mut t = TargetNets::new(&p);
    for (_, v) in p.iter_mut() {
        v.values_mut().iter_mut().for_each(|x| *x = *x * 1.5 + 0.1);
    }
    assert!(!t.params.bitwise_eq(&p));
    t.refresh(&p).unwrap();
    assert!(t.params.bitwise_eq(&p));
}

fn slots_env() -> EnvConfig {
    EnvConfig::SecretSlots(SecretSlotsConfig::default())
}

#[test]
fn full_exploration_is_uniform() {
    let env_cfg = slots_env();
    let sp = env_cfg.spec().unwrap();
    let (m, p) = model(Variant::QmixSgi, &sp, 12);
    let mut env = env_cfg.build().unwrap();
    let mut ctl = QController::new(&m, &p, 1.0, true);
    let mut counts = [0usize; 5];
    let mut rng = Rng::new(13);
    let draws = 10_000;
    let eps = collect_episodes(env.as_mut(), &mut ctl, draws / 3 + 1, &mut rng).unwrap();
    for a in eps.iter().flat_map(|e| e.actions[0].clone()).take(draws) {
        counts[a] += 1;
    }
    let exp = draws as f64 / 5.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - exp).powi(2) / exp).sum();
    // 4 degrees of freedom, 0.999 quantile.
    assert!(chi2 < 18.47, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn greedy_rollouts_are_deterministic() {
    let env_cfg = EnvConfig::GridCapture(Default::default());
    let sp = env_cfg.spec().unwrap();
    let (m, p) = model(Variant::QmixSgi, &sp, 14);
    let run = || {
        let mut env = env_cfg.build().unwrap();
        let mut ctl = QController::new(&m, &p, 0.0, false);
        collect_episodes(env.as_mut(), &mut ctl, 8, &mut Rng::new(15)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
}

#[test]
fn epsilon_schedule_is_linear() {
    let c = LearnerConfig::default();
    assert_eq!(c.epsilon_at(0), 1.0);
    assert!((c.epsilon_at(25_000) - 0.525).abs() < 1e-12);
    assert!((c.epsilon_at(50_000) - 0.05).abs() < 1e-12);
    assert!((c.epsilon_at(500_000) - 0.05).abs() < 1e-12);
    assert_eq!(c.n_parallel, 8);
}

#[test]
fn td_loss_decreases_on_secret_slots() {
    let env_cfg = slots_env();
    let sp = env_cfg.spec().unwrap();
    let mut p = ParamStore::new();
    let m = Stage1Model::init(Variant::QmixSgi, &sp, &NetDims::default(), &mut p, &mut Rng::new(16));
    let targets = TargetNets::new(&p);
    let mut env = env_cfg.build().unwrap();
    let mut buffer = ReplayBuffer::new(5000);
    let mut rng = Rng::new(17);
    {
        let mut ctl = QController::new(&m, &p, 1.0, true);
        for ep in collect_episodes(env.as_mut(), &mut ctl, 2000, &mut rng).unwrap() {
            buffer.insert(ep);
        }
    }
    let mut adam = crate::Adam::new();
    let mut losses = Vec::new();
    for _ in 0..200 {
        let s = buffer.sample(32, &mut rng);
        let b = EpisodeBatch::from_episodes(&sp, &s);
        let y = td_targets(&m, &b, &targets, sp.gamma).unwrap();
        let mut tape = Tape::with_params(&p);
        let l = td_loss(&m, &b, &mut tape, &y, &mut rng).unwrap();
        losses.push(tape.value(l).item());
        tape.backward(l).unwrap().accumulate_into(&mut p).unwrap();
        p.clip_grad_norm(10.0);
        adam.step(&mut p, 5e-4).unwrap();
    }
    let first: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let last: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(last < first, "moving average {first} -> {last}");
}

#[test]
fn gae_vanishes_at_value_fixed_point() {
    let (r, gamma) = (0.5, 0.9);
    let v = vec![r / (1.0 - gamma); 11];
    let (adv, ret) = gae(&[r; 10], &v, &[false; 10], gamma, 0.95);
    assert!(adv.iter().all(|a| a.abs() < 1e-12));
    assert!(ret.iter().all(|x| (x - 5.0).abs() < 1e-12));
}

#[test]
fn gae_with_lambda_one_is_discounted_return_minus_value() {
    let rewards = [1.0, -0.5, 2.0];
    let values = [0.3, -0.2, 0.7, 9.0];
    let (adv, _) = gae(&rewards, &values, &[false, false, true], 0.9, 1.0);
    let g0 = 1.0 - 0.9 * 0.5 + 0.81 * 2.0;
    assert!((adv[0] - (g0 - 0.3)).abs() < 1e-12);
    assert!((adv[2] - (2.0 - 0.7)).abs() < 1e-12);
}

#[test]
fn surrogate_at_unit_ratio_is_advantage_weighted_logprob() {
    let mut tape = Tape::new();
    let logp = tape.leaf(Tensor::new(&[3, 1], vec![-0.3, -1.2, -2.0]).unwrap().with_grad());
    let old = tape.constant(Tensor::new(&[3, 1], vec![-0.3, -1.2, -2.0]).unwrap());
    let adv = tape.constant(Tensor::new(&[3, 1], vec![1.5, -0.7, 0.2]).unwrap());
    let s = clipped_surrogate(&mut tape, logp, old, adv, 0.2).unwrap();
    assert_eq!(tape.value(s).values(), &[1.5, -0.7, 0.2]);
    let total = tape.sum(s).unwrap();
    let g = tape.backward(total).unwrap();
    assert_eq!(g.leaf(logp).unwrap(), &[1.5, -0.7, 0.2]);
}

#[test]
fn ppo_loss_reaches_actor_teacher_and_critic() {
    let env_cfg = slots_env();
    let sp = env_cfg.spec().unwrap();
    let mut p = ParamStore::new();
    let m = Stage1Model::init(Variant::AcSgi, &sp, &small_dims(), &mut p, &mut Rng::new(18));
    let mut env = env_cfg.build().unwrap();
    let eps = {
        let mut ctl = crate::rollout::ActorController::new(&m, &p, false, true);
        collect_episodes(env.as_mut(), &mut ctl, 16, &mut Rng::new(19)).unwrap()
    };
    assert!(eps.iter().all(|e| e.noise.len() == 1 && e.noise[0].len() == 3 * 4 && e.logp[0].len() == 3));
    let refs: Vec<&Episode> = eps.iter().collect();
    let b = EpisodeBatch::from_episodes(&sp, &refs);
    let cfg = PpoConfig::default();
    let (adv, ret) = ppo::batch_advantages(&m, &p, &refs, b.steps, &cfg).unwrap();
    let mut tape = Tape::with_params(&p);
    let l = ppo_loss(&m, &b, &mut tape, &adv, &ret, &cfg).unwrap();
    tape.backward(l).unwrap().accumulate_into(&mut p).unwrap();
    for prefix in ["actor", "gis.hyper", "critic"] {
        assert!(p.grad_norm_prefix(prefix) > 0.0, "{prefix}");
    }
}

#[test]
fn stored_logp_matches_replayed_policy() {
    let env_cfg = EnvConfig::GridCapture(Default::default());
    let sp = env_cfg.spec().unwrap();
    let mut p = ParamStore::new();
    let m = Stage1Model::init(Variant::AcUgi, &sp, &small_dims(), &mut p, &mut Rng::new(20));
    let mut env = env_cfg.build().unwrap();
    let eps = {
        let mut ctl = crate::rollout::ActorController::new(&m, &p, false, true);
        collect_episodes(env.as_mut(), &mut ctl, 4, &mut Rng::new(21)).unwrap()
    };
    let refs: Vec<&Episode> = eps.iter().collect();
    let b = EpisodeBatch::from_episodes(&sp, &refs);
    // With advantages zero and no entropy/value terms, every ratio is exactly one.
    let mut tape = Tape::with_params(&p);
    let mut h = tape.constant(Tensor::zeros(&[b.batch * 3, 16]));
    for t in 0..b.steps {
        let l = tape.constant(b.local_rows(t));
        let s = tape.constant(b.state_rows(t));
        let v = b.noise_rows(t);
        let out = m.step(&mut tape, l, s, h, Noise::Given(Tensor::new(&[v.len() / 4, 4], v).unwrap())).unwrap();
        h = out.hidden;
        let lsm = tape.log_softmax(out.out).unwrap();
        let lp = tape.gather_cols(lsm, &b.action_rows(t)).unwrap();
        let old = b.logp_rows(t);
        let mask = b.column(&b.mask, t);
        for (r, (&x, &o)) in tape.value(lp).values().iter().zip(&old).enumerate() {
            if mask[r / 3] > 0.0 {
                assert!((x - o).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn config_validation_names_fields() {
    let c = LearnerConfig { batch_size: 0, ..Default::default() };
    match c.validate() {
        Err(crate::Error::Config { path, .. }) => assert_eq!(path, "learner.batch_size"),
        other => panic!("{other:?}"),
    }
}
