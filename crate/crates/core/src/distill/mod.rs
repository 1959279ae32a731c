//! Stage 2: offline distillation of the teacher's messages into a student
//! that only reads local information, and the resulting decentralized
//! executor.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::learner::Stage1Model;
use crate::nets::{AgentHidden, LocalInfo, MessageModule, Noise, Student};
use crate::rng::Rng;
use crate::rollout::{run_episode, Controller, Decision};
use crate::{Adam, ParamStore, Tape, Tensor};

const MAGIC: &[u8; 8] = b"PTDEDATA";
const VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Greedy teacher episodes recorded into the dataset.
    pub episodes: usize,
    /// Student optimizer steps (one minibatch each).
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub heldout_fraction: f64,
    /// Steps between held-out evaluations.
    pub eval_every: usize,
    /// Held-out evaluations without improvement before stopping.
    pub patience: usize,
}

/// Largest accepted `epochs`.
pub const MAX_EPOCHS: usize = 500_000;

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            episodes: 100,
            epochs: 20_000,
            batch_size: 256,
            lr: 1e-3,
            heldout_fraction: 0.1,
            eval_every: 250,
            patience: 20,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| Err(Error::Config { path: format!("distill.{path}"), message: message.into() });
        if self.episodes == 0 {
            return bad("episodes", "must be >= 1");
        }
        if self.epochs > MAX_EPOCHS {
            return bad("epochs", &format!("must be <= {MAX_EPOCHS}"));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size", "batch_size and eval_every must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return bad("heldout_fraction", "must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One (episode, step, agent) record: what the agent saw, the global state,
/// and the teacher's message mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSample {
    pub episode: usize,
    pub t: usize,
    pub agent: usize,
    pub local: LocalInfo,
    pub state: Vec<f64>,
    pub z_target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillDataset {
    pub config_hash: u64,
    pub episodes: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub z_dim: usize,
    pub samples: Vec<DistillSample>,
}

/// Greedy centralized controller that records `(local, state, mu_i)` for
/// every agent at every step.
struct TeacherRecorder<'a> {
    model: &'a Stage1Model,
    params: &'a ParamStore,
    hidden: Tensor,
    episode: usize,
    t: usize,
    samples: Vec<DistillSample>,
}

impl Controller for TeacherRecorder<'_> {
    fn begin_episode(&mut self) {
        self.hidden = Tensor::zeros(&[self.model.n_agents(), self.model.dims.d_h]);
        self.t = 0;
    }

    fn act(&mut self, state: &[f64], locals: &[LocalInfo], _rng: &mut Rng) -> Result<Decision> {
        let mut tape = Tape::no_grad(self.params);
        let mut lv = Vec::new();
        locals.iter().for_each(|l| l.write_into(&mut lv));
        let l = tape.constant(Tensor::new(&[locals.len(), locals[0].dim()], lv)?);
        let s = tape.constant(Tensor::row(state.to_vec()));
        let h = tape.constant(self.hidden.clone());
        let out = self.model.step(&mut tape, l, s, h, Noise::Mean)?;
        self.hidden = tape.value(out.hidden).clone();
        let m = out.message.as_ref().expect("teacher has a message module");
        let mu = tape.value(m.mu).values();
        let dz = self.model.dims.d_z;
        for (i, local) in locals.iter().enumerate() {
            self.samples.push(DistillSample {
                episode: self.episode,
                t: self.t,
                agent: i,
                local: local.clone(),
                state: state.to_vec(),
                z_target: mu[i * dz..(i + 1) * dz].to_vec(),
            });
        }
        self.t += 1;
        let na = self.model.spec.n_actions;
        let actions = tape
            .value(out.out)
            .values()
            .chunks(na)
            .map(|row| (0..na).fold(0, |b, a| if row[a] > row[b] { a } else { b }))
            .collect();
        Ok(Decision::actions(actions))
    }
}

/// Rolls out the greedy teacher policy (messages at their mean) for
/// `episodes` episodes and records the teacher's message means.
pub fn generate_dataset(
    model: &Stage1Model,
    params: &ParamStore,
    env: &mut dyn Environment,
    episodes: usize,
    config_hash: u64,
    rng: &mut Rng,
) -> Result<DistillDataset> {
    let prefix = model
        .message
        .prefix()
        .ok_or_else(|| Error::Checkpoint(format!("variant {} has no teacher message module", model.variant)))?;
    if !params.has_prefix(prefix) {
        return Err(Error::Checkpoint(format!("checkpoint has no `{prefix}*` teacher parameters")));
    }
    model.check_store(params)?;
    let mut rec = TeacherRecorder {
        model,
        params,
        hidden: Tensor::zeros(&[model.n_agents(), model.dims.d_h]),
        episode: 0,
        t: 0,
        samples: Vec::new(),
    };
    for e in 0..episodes {
        rec.episode = e;
        let mut ep_rng = Rng::new(rng.next_u64());
        run_episode(env, &mut rec, &mut ep_rng)?;
    }
    let spec = &model.spec;
    Ok(DistillDataset {
        config_hash,
        episodes,
        n_agents: spec.n_agents,
        n_actions: spec.n_actions,
        obs_dim: spec.obs_dim,
        state_dim: spec.state_dim,
        z_dim: model.message.z_dim(),
        samples: rec.samples,
    })
}

fn put(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f(out: &mut Vec<u8>, xs: &[f64]) {
    xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

impl DistillDataset {
    pub fn local_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }

    /// Floats per record: episode, t, agent, local, state, z_target.
    pub fn record_width(&self) -> usize {
        3 + self.local_dim() + self.state_dim + self.z_dim
    }

    /// Layout: magic `PTDEDATA`, then little-endian u64 version, config hash,
    /// episodes, samples, n_agents, n_actions, obs_dim, state_dim, z_dim;
    /// then one record of `record_width()` little-endian f64 per sample.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(80 + self.samples.len() * self.record_width() * 8);
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.config_hash,
            self.episodes as u64,
            self.samples.len() as u64,
            self.n_agents as u64,
            self.n_actions as u64,
            self.obs_dim as u64,
            self.state_dim as u64,
            self.z_dim as u64,
        ] {
            put(&mut out, v);
        }
        for s in &self.samples {
            put_f(&mut out, &[s.episode as f64, s.t as f64, s.agent as f64]);
            put_f(&mut out, &s.local.obs);
            put_f(&mut out, &s.local.last_action);
            put_f(&mut out, &s.local.agent_id);
            put_f(&mut out, &s.state);
            put_f(&mut out, &s.z_target);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Dataset(m.to_string());
        if bytes.len() < 80 || &bytes[..8] != MAGIC {
            return Err(err("not a dataset file"));
        }
        let u = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"));
        if u(0) != VERSION {
            return Err(Error::Dataset(format!("unsupported version {}", u(0))));
        }
        let mut ds = DistillDataset {
            config_hash: u(1),
            episodes: u(2) as usize,
            n_agents: u(4) as usize,
            n_actions: u(5) as usize,
            obs_dim: u(6) as usize,
            state_dim: u(7) as usize,
            z_dim: u(8) as usize,
            samples: Vec::new(),
        };
        let count = u(3) as usize;
        let w = ds.record_width();
        let body = &bytes[80..];
        if body.len() != count * w * 8 {
            return Err(Error::Dataset(format!("expected {} record bytes, found {}", count * w * 8, body.len())));
        }
        let (od, na, n, sd) = (ds.obs_dim, ds.n_actions, ds.n_agents, ds.state_dim);
        ds.samples = body
            .chunks(w * 8)
            .map(|rec| {
                let f: Vec<f64> = rec.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                let mut o = 3;
                let mut take = |k: usize| {
                    let v = f[o..o + k].to_vec();
                    o += k;
                    v
                };
                let local = LocalInfo { obs: take(od), last_action: take(na), agent_id: take(n) };
                let state = take(sd);
                let z_target = take(ds.z_dim);
                DistillSample { episode: f[0] as usize, t: f[1] as usize, agent: f[2] as usize, local, state, z_target }
            })
            .collect();
        if ds.samples.iter().any(|s| s.z_target.iter().any(|z| !z.is_finite())) {
            return Err(err("non-finite teacher target"));
        }
        Ok(ds)
    }

    /// Hex sha256 of the serialized dataset.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(hex_digest(&bytes))
    }

    /// Loads a dataset, refusing it if its digest differs from `expected`.
    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if let Some(d) = expected_digest {
            let found = hex_digest(&bytes);
            if found != d {
                return Err(Error::Dataset(format!("{} was modified after generation (sha256 {found}, expected {d})", path.display())));
            }
        }
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Trained student plus the held-out errors used for early stopping.
#[derive(Debug, Clone)]
pub struct StudentFit {
    pub student: Student,
    /// Only `student.*` parameters.
    pub params: ParamStore,
    pub init_heldout_mse: f64,
    pub heldout_mse: f64,
    pub steps_run: usize,
}

fn batch_mse(student: &Student, params: &ParamStore, samples: &[&DistillSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::no_grad(params);
    let (x, y) = stack(samples, student)?;
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let z = student.forward(&mut tape, xv)?;
    let l = tape.mse(z, yv)?;
    Ok(tape.value(l).item())
}

fn stack(samples: &[&DistillSample], student: &Student) -> Result<(Tensor, Tensor)> {
    let mut x = Vec::with_capacity(samples.len() * student.local_dim);
    let mut y = Vec::with_capacity(samples.len() * student.z_dim);
    for s in samples {
        s.local.write_into(&mut x);
        y.extend_from_slice(&s.z_target);
    }
    Ok((Tensor::new(&[samples.len(), student.local_dim], x)?, Tensor::new(&[samples.len(), student.z_dim], y)?))
}

/// Fits the student to the dataset by minibatch MSE against the teacher
/// means. Episodes are split into training and held-out sets; the returned
/// parameters are those with the lowest held-out error seen (the initial
/// ones included). Only the dataset is consulted.
pub fn train_student(dataset: &DistillDataset, hidden: usize, cfg: &DistillConfig, seed: u64) -> Result<StudentFit> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let root = Rng::new(seed);
    let mut params = ParamStore::new();
    let student = Student::init(dataset.local_dim(), hidden, dataset.z_dim, &mut params, &mut root.split(0));

    let mut ids: Vec<usize> = dataset.samples.iter().map(|s| s.episode).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut split_rng = root.split(1);
    split_rng.shuffle(&mut ids);
    let n_held = if ids.len() >= 2 { ((ids.len() as f64 * cfg.heldout_fraction).round() as usize).clamp(1, ids.len() - 1) } else { 0 };
    let held_ids: std::collections::BTreeSet<usize> = ids[..n_held].iter().copied().collect();
    let (held, train): (Vec<&DistillSample>, Vec<&DistillSample>) =
        dataset.samples.iter().partition(|s| held_ids.contains(&s.episode));
    let held = if held.is_empty() { train.clone() } else { held };

    let init_mse = batch_mse(&student, &params, &held)?;
    let mut best = (init_mse, params.detached());
    let mut stale = 0;
    let mut adam = Adam::new();
    let mut rng = root.split(2);
    let mut steps_run = 0;
    for step in 1..=cfg.epochs {
        let mb: Vec<&DistillSample> = (0..cfg.batch_size.min(train.len())).map(|_| train[rng.below(train.len())]).collect();
        let (x, y) = stack(&mb, &student)?;
        let mut tape = Tape::with_params(&params);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let z = student.forward(&mut tape, xv)?;
        let loss = tape.mse(z, yv)?;
        let grads = tape.backward(loss)?;
        grads.accumulate_into(&mut params)?;
        adam.step(&mut params, cfg.lr)?;
        steps_run = step;
        if step % cfg.eval_every == 0 || step == cfg.epochs {
            let m = batch_mse(&student, &params, &held)?;
            if !m.is_finite() {
                return Err(Error::NonFinite("student held-out error".into()));
            }
            if m < best.0 {
                best = (m, params.detached());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    log::info!("student: held-out mse {:.3e} -> {:.3e} after {steps_run} steps", init_mse, best.0);
    Ok(StudentFit { student, params: best.1, init_heldout_mse: init_mse, heldout_mse: best.0, steps_run })
}

/// Local-only policy: the stage-1 agent network with the student's `z'` in
/// place of the teacher message. Variants without a message module run their
/// agents unchanged.
#[derive(Debug, Clone)]
pub struct DecentralizedExecutor {
    model: Stage1Model,
    params: ParamStore,
    student: Option<Student>,
}

impl DecentralizedExecutor {
    /// `params` must hold the stage-1 agent parameters and, for variants
    /// with a message module, the `student.*` parameters.
    pub fn new(model: Stage1Model, stage1: &ParamStore, student: Option<&ParamStore>) -> Result<Self> {
        let prefix = if model.variant.is_actor_critic() { "actor." } else { "agent." };
        let mut params = stage1.subset(prefix);
        if params.is_empty() {
            return Err(Error::Checkpoint(format!("checkpoint has no `{prefix}*` parameters")));
        }
        let student = match (&model.message, student) {
            (MessageModule::None, _) => None,
            (_, None) => return Err(Error::Checkpoint("variant needs a trained student".into())),
            (_, Some(sp)) => {
                let s = Student::from_store(sp)?;
                if s.local_dim != model.spec.local_dim() || s.z_dim != model.message.z_dim() {
                    return Err(Error::Checkpoint("student dimensions do not match the agent network".into()));
                }
                params.extend(sp.subset("student."));
                Some(s)
            }
        };
        Ok(DecentralizedExecutor { model, params, student })
    }

    pub fn initial_hidden(&self) -> AgentHidden {
        AgentHidden::zeros(self.model.dims.d_h)
    }

    /// Q-values (or logits) for one agent from its local information and
    /// recurrent state alone.
    pub fn values(&self, local: &LocalInfo, hidden: &AgentHidden) -> Result<(Vec<f64>, AgentHidden)> {
        let z = match &self.student {
            Some(s) => Some(s.forward_one(&self.params, local)?),
            None => None,
        };
        self.model.agent.forward_one(&self.params, local, hidden, z.as_deref())
    }

    /// Greedy action for one agent.
    pub fn act(&self, local: &LocalInfo, hidden: &AgentHidden) -> Result<(usize, AgentHidden)> {
        let (q, h) = self.values(local, hidden)?;
        let a = (0..q.len()).fold(0, |b, a| if q[a] > q[b] { a } else { b });
        Ok((a, h))
    }

    pub fn controller(&self) -> DecentralizedController<'_> {
        DecentralizedController { exec: self, hidden: Vec::new() }
    }
}

/// Adapts a [`DecentralizedExecutor`] to the [`Controller`] interface; the
/// state argument is ignored.
pub struct DecentralizedController<'a> {
    exec: &'a DecentralizedExecutor,
    hidden: Vec<AgentHidden>,
}

impl Controller for DecentralizedController<'_> {
    fn begin_episode(&mut self) {
        self.hidden = (0..self.exec.model.n_agents()).map(|_| self.exec.initial_hidden()).collect();
    }

    fn act(&mut self, _state: &[f64], locals: &[LocalInfo], _rng: &mut Rng) -> Result<Decision> {
        let mut actions = Vec::with_capacity(locals.len());
        for (local, h) in locals.iter().zip(self.hidden.iter_mut()) {
            let (a, nh) = self.exec.act(local, h)?;
            *h = nh;
            actions.push(a);
        }
        Ok(Decision::actions(actions))
    }
}
