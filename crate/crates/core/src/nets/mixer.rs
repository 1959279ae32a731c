use super::layers::{Linear, Mlp};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Monotonic mixing network. Both layer weights are generated from the
/// state by hypernetworks and passed through `abs`, so `dQ_tot/dq_i >= 0`:
///
/// ```text
/// hidden = elu(q |W1(s)| + b1(s))
/// Q_tot  = hidden |w2(s)| + V(s)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct QmixNet {
    hyper_w1: Mlp,
    hyper_b1: Linear,
    hyper_w2: Mlp,
    hyper_v: Mlp,
    pub n_agents: usize,
    pub state_dim: usize,
    pub embed: usize,
}

impl QmixNet {
    pub fn init<T: Scalar>(
        n_agents: usize,
        state_dim: usize,
        embed: usize,
        hyper_hidden: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Self {
        QmixNet {
            hyper_w1: Mlp::init("mixer.hyper_w1", &[state_dim, hyper_hidden, n_agents * embed], store, rng),
            hyper_b1: Linear::init("mixer.hyper_b1", state_dim, embed, store, rng),
            hyper_w2: Mlp::init("mixer.hyper_w2", &[state_dim, hyper_hidden, embed], store, rng),
            hyper_v: Mlp::init("mixer.hyper_v", &[state_dim, embed, 1], store, rng),
            n_agents,
            state_dim,
            embed,
        }
    }

    /// `q: [b, n_agents]`, `state: [b, state_dim]` -> `[b, 1]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, q: Var, state: Var) -> Result<Var> {
        let (qs, ss) = (tape.shape(q).to_vec(), tape.shape(state).to_vec());
        if qs.len() != 2 || ss.len() != 2 || qs[1] != self.n_agents || ss[1] != self.state_dim || qs[0] != ss[0] {
            return Err(Error::shape("qmix_mix", &[&qs, &ss]));
        }
        let w1 = self.hyper_w1.forward(tape, state)?;
        let w1 = tape.abs(w1)?;
        let b1 = self.hyper_b1.forward(tape, state)?;
        let hidden = tape.batched_matvec(q, w1)?;
        let hidden = tape.add(hidden, b1)?;
        let hidden = tape.elu(hidden)?;
        let w2 = self.hyper_w2.forward(tape, state)?;
        let w2 = tape.abs(w2)?;
        let y = tape.batched_matvec(hidden, w2)?;
        let v = self.hyper_v.forward(tape, state)?;
        tape.add(y, v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Vdn,
    Qmix(QmixNet),
}

/// Exact sum of per-agent values: `[b, n] -> [b, 1]`.
pub fn vdn_mix<T: Scalar>(tape: &mut Tape<'_, T>, q: Var) -> Result<Var> {
    tape.sum_cols(q)
}

impl Mixer {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, q: Var, state: Var) -> Result<Var> {
        match self {
            Mixer::Vdn => vdn_mix(tape, q),
            Mixer::Qmix(net) => net.forward(tape, q, state),
        }
    }

    /// Unbatched convenience without gradient recording.
    pub fn mix_one(&self, store: &ParamStore<f64>, q: &[f64], state: &[f64]) -> Result<f64> {
        let mut tape = Tape::no_grad(store);
        let qv = tape.constant(Tensor::row(q.to_vec()));
        let sv = tape.constant(Tensor::row(state.to_vec()));
        let out = self.forward(&mut tape, qv, sv)?;
        Ok(tape.value(out).item())
    }
}

/// Centralized state-value critic `V(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    mlp: Mlp,
    pub state_dim: usize,
}

impl Critic {
    pub fn init<T: Scalar>(state_dim: usize, hidden: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        Critic { mlp: Mlp::init("critic", &[state_dim, hidden, hidden, 1], store, rng), state_dim }
    }

    /// `state: [b, state_dim]` -> `[b, 1]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, state: Var) -> Result<Var> {
        if tape.shape(state).last() != Some(&self.state_dim) {
            return Err(Error::shape("critic_forward", &[tape.shape(state), &[self.state_dim]]));
        }
        self.mlp.forward(tape, state)
    }
}
