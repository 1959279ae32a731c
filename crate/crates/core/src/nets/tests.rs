use super::*;
use crate::env::joint_actions;
use crate::gradcheck::grad_check_params;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

const LOCAL: usize = 4 + 5 + 3;
const STATE: usize = 25;

fn local(agent: usize) -> LocalInfo {
    LocalInfo::new(vec![0.1, -0.2, 0.3, 0.0], Some(2), 5, agent, 3)
}

fn random_state(rng: &mut Rng) -> Vec<f64> {
    (0..STATE).map(|_| rng.normal()).collect()
}

#[test]
fn local_info_one_hots() {
    let l = LocalInfo::new(vec![0.0; 4], None, 5, 1, 3);
    assert_eq!(l.last_action.iter().sum::<f64>(), 0.0);
    assert_eq!(l.agent_id, vec![0.0, 1.0, 0.0]);
    assert_eq!(l.dim(), LOCAL);
    let l = local(2);
    assert_eq!(l.last_action.iter().sum::<f64>(), 1.0);
}

#[test]
fn agent_zero_weights_give_equal_q() {
    let mut store = ParamStore::new();
    let net = AgentNet::init("agent", LOCAL, 64, 8, 5, &mut store, &mut Rng::new(0));
    store.iter_mut().for_each(|(_, t)| t.values_mut().fill(0.0));
    let (q, h) = net.forward_one(&store, &local(0), &AgentHidden::zeros(64), Some(&[0.5; 8])).unwrap();
    assert_eq!(q.len(), 5);
    assert!(q.iter().all(|&v| v == q[0]));
    assert_eq!(h.h.len(), 64);
}

#[test]
fn agent_forward_is_pure() {
    let mut store = ParamStore::new();
    let net = AgentNet::init("agent", LOCAL, 64, 0, 5, &mut store, &mut Rng::new(1));
    let h0 = AgentHidden { h: (0..64).map(|i| (i as f64 * 0.1).sin()).collect() };
    let a = net.forward_one(&store, &local(1), &h0, None).unwrap();
    let b = net.forward_one(&store, &local(1), &h0, None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.1, h0, "hidden state advances");
}

#[test]
fn message_changes_q_values() {
    let mut store = ParamStore::new();
    let net = AgentNet::init("agent", LOCAL, 64, 8, 5, &mut store, &mut Rng::new(2));
    let h0 = AgentHidden::zeros(64);
    let mut rng = Rng::new(3);
    let m: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let (with, _) = net.forward_one(&store, &local(0), &h0, Some(&m)).unwrap();
    let (zero, _) = net.forward_one(&store, &local(0), &h0, Some(&[0.0; 8])).unwrap();
    assert!(with.iter().zip(&zero).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn agent_message_dim_mismatch() {
    let mut store = ParamStore::new();
    let net = AgentNet::init("agent", LOCAL, 64, 8, 5, &mut store, &mut Rng::new(2));
    let h0 = AgentHidden::zeros(64);
    assert!(net.forward_one(&store, &local(0), &h0, Some(&[0.0; 7])).is_err());
    assert!(net.forward_one(&store, &local(0), &h0, None).is_err());
    let bad = LocalInfo::new(vec![0.0; 3], None, 5, 0, 3);
    assert!(net.forward_one(&store, &bad, &h0, Some(&[0.0; 8])).is_err());
}

#[test]
fn giu_sigma_floor_is_exact_in_the_limit() {
    let mut store = ParamStore::new();
    let giu = Giu::init(STATE, 32, 8, 0.05, &mut store, &mut Rng::new(4));
    store.get_mut("giu.dg.w").unwrap().values_mut().fill(0.0);
    let b = store.get_mut("giu.dg.b").unwrap();
    b.values_mut()[8..].fill(-1e4);
    let m = giu.forward_one(&store, &random_state(&mut Rng::new(5)), Noise::Mean).unwrap();
    assert!(m.sigma.iter().all(|&s| s == 0.05));
}

#[test]
fn giu_message_is_shared_by_all_agents() {
    let mut store = ParamStore::new();
    let giu = Giu::init(STATE, 32, 8, 0.05, &mut store, &mut Rng::new(6));
    let module = MessageModule::Unified(giu);
    let mut tape = Tape::no_grad(&store);
    let locals: Vec<f64> = (0..3).flat_map(|i| local(i).to_vec()).collect();
    let l = tape.constant(Tensor::new(&[3, LOCAL], locals).unwrap());
    let s = tape.constant(Tensor::row(random_state(&mut Rng::new(7))));
    let mut rng = Rng::new(8);
    let m = module.forward(&mut tape, l, s, 3, Noise::Sample(&mut rng)).unwrap().unwrap();
    let z = tape.value(m.z).values();
    assert_eq!(&z[0..8], &z[8..16]);
    assert_eq!(&z[0..8], &z[16..24]);
}

#[test]
fn reparameterized_sample_mean_and_std() {
    // Fixed (mu, sigma) via a zero-weight generator; 1e5 draws.
    let mut store = ParamStore::new();
    let dg = DistributionGenerator::init("dg", 3, 4, 0.05, &mut store, &mut Rng::new(9));
    store.get_mut("dg.w").unwrap().values_mut().fill(0.0);
    let bias = [0.5, -1.0, 2.0, 0.0, -1.0, 0.0, 1.0, -3.0];
    store.get_mut("dg.b").unwrap().values_mut().copy_from_slice(&bias);
    let n = 100_000;
    let mut tape = Tape::no_grad(&store);
    let g = tape.constant(Tensor::zeros(&[n, 3]));
    let mut rng = Rng::new(10);
    let m = dg.forward(&mut tape, g, Noise::Sample(&mut rng)).unwrap();
    let z = tape.value(m.z).values();
    let sigma = &tape.value(m.sigma).values()[..4];
    for c in 0..4 {
        let mu = bias[c];
        let mean = z.iter().skip(c).step_by(4).sum::<f64>() / n as f64;
        assert!((mean - mu).abs() < 3.0 * sigma[c] / (n as f64).sqrt(), "coord {c}: {mean} vs {mu}");
        assert!(sigma[c] >= 0.05);
    }
}

#[test]
fn gis_specializes_by_agent_index() {
    let mut store = ParamStore::new();
    let gis = Gis::init(LOCAL, STATE, 64, 32, 8, 0.05, &mut store, &mut Rng::new(11));
    let mut tape = Tape::no_grad(&store);
    let rows: Vec<f64> = [local(0), local(1)].iter().flat_map(LocalInfo::to_vec).collect();
    let l = tape.constant(Tensor::new(&[2, LOCAL], rows).unwrap());
    let (w, b) = gis.generated_params(&mut tape, l).unwrap();
    let wv = tape.value(w).values();
    let d = STATE * 32;
    let max_dw = (0..d).map(|k| (wv[k] - wv[d + k]).abs()).fold(0.0, f64::max);
    assert!(max_dw > 0.0);
    assert_eq!(tape.shape(b), &[2, 32]);
}

#[test]
fn gis_is_deterministic_given_rng_state() {
    let mut store = ParamStore::new();
    let gis = Gis::init(LOCAL, STATE, 64, 32, 8, 0.05, &mut store, &mut Rng::new(12));
    let s = random_state(&mut Rng::new(13));
    let rng = Rng::new(14);
    let a = gis.forward_one(&store, &local(2), &s, Noise::Sample(&mut rng.clone())).unwrap();
    let b = gis.forward_one(&store, &local(2), &s, Noise::Sample(&mut rng.clone())).unwrap();
    assert_eq!(a, b);
    assert!(a.sigma.iter().all(|&v| v >= 0.05));
}

#[test]
fn gis_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let gis = Gis::init(LOCAL, STATE, 64, 32, 8, 0.05, &mut store, &mut Rng::new(15));
    let s = random_state(&mut Rng::new(16));
    let eps = Tensor::new(&[1, 8], (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect()).unwrap();
    let f = |tape: &mut Tape<'_, f64>| {
        let l = tape.constant(Tensor::row(local(1).to_vec()));
        let sv = tape.constant(Tensor::row(s.clone()));
        let m = gis.forward(tape, l, sv, Noise::Given(eps.clone()))?;
        tape.mean(m.z)
    };
    let r = grad_check_params(f, &store, "gis.hyper", 1e-5, 1e-4, 40, &mut Rng::new(17)).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn reparameterized_gradient_wrt_mu_is_one_over_dz() {
    let mut tape = Tape::<f64>::new();
    let mu = tape.leaf(Tensor::from_f64(&[1, 8], &[0.3; 8]).unwrap().with_grad());
    let sigma = tape.constant(Tensor::from_f64(&[1, 8], &[0.2; 8]).unwrap());
    let mut rng = Rng::new(18);
    let eps = tape.constant(Tensor::new(&[1, 8], (0..8).map(|_| rng.normal()).collect()).unwrap());
    let se = tape.mul(sigma, eps).unwrap();
    let z = tape.add(mu, se).unwrap();
    let l = tape.mean(z).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.leaf(mu).unwrap().iter().all(|&v| (v - 0.125).abs() < 1e-15));
}

#[test]
fn student_zero_init_outputs_zero() {
    let mut store = ParamStore::new();
    let st = Student::init_zeros(LOCAL, 64, 8, &mut store);
    assert_eq!(st.forward_one(&store, &local(0)).unwrap(), vec![0.0; 8]);
}

#[test]
fn student_is_pure() {
    let mut store = ParamStore::new();
    let st = Student::init(LOCAL, 64, 8, &mut store, &mut Rng::new(19));
    assert_eq!(st.forward_one(&store, &local(1)).unwrap(), st.forward_one(&store, &local(1)).unwrap());
    let rebound = Student::from_store(&store).unwrap();
    assert_eq!(rebound, st);
}

#[test]
fn vdn_is_exact_sum() {
    let store = ParamStore::new();
    assert_eq!(Mixer::Vdn.mix_one(&store, &[1.0, 2.0], &[0.0]).unwrap(), 3.0);
    assert_eq!(Mixer::Vdn.mix_one(&store, &[0.0, 0.0, 0.0], &[0.0]).unwrap(), 0.0);
}

#[test]
fn vdn_greedy_matches_joint_argmax() {
    let mut rng = Rng::new(20);
    for _ in 0..20 {
        let table: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let greedy: Vec<usize> = table
            .iter()
            .map(|row| (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap())
            .collect();
        let store = ParamStore::new();
        let best = joint_actions(2, 3)
            .max_by(|a, b| {
                let qa = Mixer::Vdn.mix_one(&store, &[table[0][a[0]], table[1][a[1]]], &[]).unwrap();
                let qb = Mixer::Vdn.mix_one(&store, &[table[0][b[0]], table[1][b[1]]], &[]).unwrap();
                qa.total_cmp(&qb)
            })
            .unwrap();
        assert_eq!(greedy, best);
    }
}

fn qmix(seed: u64) -> (ParamStore<f64>, Mixer) {
    let mut store = ParamStore::new();
    let net = QmixNet::init(3, STATE, 32, 64, &mut store, &mut Rng::new(seed));
    (store, Mixer::Qmix(net))
}

#[test]
fn qmix_zero_hyper_outputs_give_state_bias() {
    let (mut store, mixer) = qmix(21);
    for (name, t) in store.iter_mut() {
        if name.starts_with("mixer.hyper_w1.1") || name.starts_with("mixer.hyper_w2.1") || name.starts_with("mixer.hyper_b1") {
            t.values_mut().fill(0.0);
        }
    }
    let s = random_state(&mut Rng::new(22));
    let q1 = mixer.mix_one(&store, &[1.0, -2.0, 3.0], &s).unwrap();
    let q2 = mixer.mix_one(&store, &[-5.0, 0.0, 0.5], &s).unwrap();
    assert_eq!(q1, q2);
    let mut tape = Tape::no_grad(&store);
    let Mixer::Qmix(net) = &mixer else { unreachable!() };
    let sv = tape.constant(Tensor::row(s.clone()));
    let qv = tape_q(&mut tape);
    let v = net.forward(&mut tape, qv, sv).unwrap();
    assert_eq!(tape.value(v).item(), q1);
}

fn tape_q(tape: &mut Tape<'_, f64>) -> crate::tape::Var {
    tape.constant(Tensor::row(vec![9.0, 9.0, 9.0]))
}

#[test]
fn qmix_is_monotone_in_each_agent_value() {
    let (store, mixer) = qmix(23);
    let mut rng = Rng::new(24);
    for _ in 0..50 {
        let q: Vec<f64> = (0..3).map(|_| rng.normal() * 3.0).collect();
        let s = random_state(&mut rng);
        let base = mixer.mix_one(&store, &q, &s).unwrap();
        for i in 0..3 {
            let mut qp = q.clone();
            qp[i] += 1e-3;
            assert!(mixer.mix_one(&store, &qp, &s).unwrap() >= base);
        }
    }
}

#[test]
fn qmix_shape_mismatch() {
    let (store, mixer) = qmix(25);
    assert!(mixer.mix_one(&store, &[1.0, 2.0], &[0.0; STATE]).is_err());
    assert!(mixer.mix_one(&store, &[1.0, 2.0, 3.0], &[0.0; 3]).is_err());
}

#[test]
fn equal_logits_give_uniform_policy() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::row(vec![0.7; 5]));
    let p = tape.softmax(l).unwrap();
    assert!(tape.value(p).values().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn critic_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let critic = Critic::init(8, 64, &mut store, &mut Rng::new(26));
    let mut rng = Rng::new(27);
    let s = Tensor::new(&[4, 8], (0..32).map(|_| rng.normal()).collect()).unwrap();
    let f = |tape: &mut Tape<'_, f64>| {
        let sv = tape.constant(s.clone());
        let v = critic.forward(tape, sv)?;
        tape.mean(v)
    };
    let r = grad_check_params(f, &store, "critic", 1e-5, 1e-4, 30, &mut rng).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn qmix_gradient_matches_finite_differences() {
    let (store, mixer) = qmix(28);
    let mut rng = Rng::new(29);
    let s = Tensor::new(&[4, STATE], (0..4 * STATE).map(|_| rng.normal()).collect()).unwrap();
    let q = Tensor::new(&[4, 3], (0..12).map(|_| rng.normal()).collect()).unwrap();
    let f = |tape: &mut Tape<'_, f64>| {
        let sv = tape.constant(s.clone());
        let qv = tape.constant(q.clone());
        let y = mixer.forward(tape, qv, sv)?;
        tape.mean(y)
    };
    let r = grad_check_params(f, &store, "mixer", 1e-5, 1e-4, 60, &mut rng).unwrap();
    assert!(r.passed(), "{r:?}");
    let mut with_q = store.clone();
    with_q.insert("q", q.clone());
    let g = |tape: &mut Tape<'_, f64>| {
        let qv = tape.param("q")?;
        let sv = tape.constant(s.clone());
        let y = mixer.forward(tape, qv, sv)?;
        tape.mean(y)
    };
    let r = grad_check_params(g, &with_q, "q", 1e-5, 1e-4, 12, &mut rng).unwrap();
    assert!(r.passed(), "{r:?}");
}
