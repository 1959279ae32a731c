use proptest::prelude::*;

use ptde::config::ExperimentConfig;
use ptde::env::grid_capture::{GridCapture, GridCaptureConfig};
use ptde::env::{EnvConfig, Environment};
use ptde::eval::compute_prr;
use ptde::nets::{DistributionGenerator, Mixer, Noise, QmixNet};
use ptde::{Adam, ParamStore, Rng, Tape, Tensor, Variant};

fn finite() -> impl Strategy<Value = f64> {
    -50.0..50.0f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, v in prop::collection::vec(finite(), 6 * 4)) {
        let n = rows * 6;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[rows, 6], v[..n].to_vec()).unwrap());
        let p = tape.softmax(x).unwrap();
        for row in tape.value(p).values().chunks(6) {
            prop_assert!(row.iter().all(|&q| q >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn adam_with_zero_gradients_is_identity(v in prop::collection::vec(finite(), 1..20), lr in 1e-5..1.0f64, steps in 1usize..5) {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[v.len()], v.clone()).unwrap());
        let before = store.clone();
        let mut adam = Adam::new();
        for _ in 0..steps {
            store.zero_grads();
            adam.step(&mut store, lr).unwrap();
        }
        prop_assert!(store.bitwise_eq(&before));
    }

    #[test]
    fn rng_streams_repeat_bitwise(seed in any::<u64>(), stream in any::<u64>()) {
        let (mut a, mut b) = (Rng::new(seed).split(stream), Rng::new(seed).split(stream));
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn grid_capture_episodes_respect_limit_and_observation_map(seed in any::<u64>(), limit in 1usize..40, size in 3usize..9) {
        let cfg = GridCaptureConfig { size, episode_limit: limit, ..GridCaptureConfig::default() };
        let mut env = GridCapture::new(cfg.clone()).unwrap();
        let mut rng = Rng::new(seed);
        let (mut state, mut obs) = env.reset(&mut rng);
        let mut steps = 0;
        loop {
            for (i, o) in obs.iter().enumerate() {
                prop_assert_eq!(o, &GridCapture::observation_from_state(size, cfg.n_agents, &state, i));
            }
            let joint: Vec<usize> = (0..cfg.n_agents).map(|_| rng.below(5)).collect();
            let r = env.step(&joint).unwrap();
            steps += 1;
            (state, obs) = (r.next_state, r.next_obs);
            if r.terminated {
                break;
            }
        }
        prop_assert!(steps <= limit);
    }

    #[test]
    fn sigma_never_drops_below_floor(seed in any::<u64>(), scale in 0.0..1e3f64, sigma_min in 1e-3..1.0f64) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let dg = DistributionGenerator::init("dg", 3, 4, sigma_min, &mut store, &mut rng);
        let mut tape = Tape::no_grad(&store);
        let g = tape.constant(Tensor::new(&[8, 3], (0..24).map(|_| rng.normal() * scale).collect()).unwrap());
        let m = dg.forward(&mut tape, g, Noise::Sample(&mut rng)).unwrap();
        prop_assert!(tape.value(m.sigma).values().iter().all(|&s| s >= sigma_min));
    }

    #[test]
    fn qmix_is_monotone(seed in any::<u64>(), q in prop::collection::vec(-10.0..10.0f64, 3), s in prop::collection::vec(-3.0..3.0f64, 5)) {
        let mut store = ParamStore::new();
        let mixer = Mixer::Qmix(QmixNet::init(3, 5, 8, 16, &mut store, &mut Rng::new(seed)));
        for i in 0..3 {
            let at = |d: f64| {
                let mut qq = q.clone();
                qq[i] += d;
                mixer.mix_one(&store, &qq, &s).unwrap()
            };
            prop_assert!((at(1e-5) - at(-1e-5)) / 2e-5 >= -1e-8);
        }
    }

    #[test]
    fn prr_identity_and_scale_invariance(a in 0.0..1.0f64, b in 1e-3..1.0f64, k in 1e-3..1e3f64) {
        prop_assert_eq!(compute_prr(b, b), Some(1.0));
        let (x, y) = (compute_prr(k * a, k * b).unwrap(), compute_prr(a, b).unwrap());
        prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        prop_assert_eq!(compute_prr(a, 0.0), None);
    }

    #[test]
    fn config_round_trip(
        variant in prop::sample::select(Variant::ALL.to_vec()),
        lr in 1e-6..1e-1f64,
        episodes in 1usize..100_000,
        d_z in 1usize..32,
        seeds in prop::collection::vec(0u64..1000, 1..5),
        grid in any::<bool>(),
    ) {
        let env: EnvConfig = if grid {
            serde_json::from_str(r#"{"name":"grid_capture","size":6}"#).unwrap()
        } else {
            serde_json::from_str(r#"{"name":"secret_slots","n_actions":4}"#).unwrap()
        };
        let mut c = ExperimentConfig::new(env, variant);
        c.learner.lr = lr;
        c.learner.total_episodes = episodes;
        c.nets.d_z = d_z;
        c.seeds = seeds;
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.config_hash(), c.config_hash());
    }
}
