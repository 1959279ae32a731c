//! Global-information message generators.
//!
//! * [`Giu`]: one message per timestep computed from the global state and
//!   shared by every agent.
//! * [`Gis`]: a hypernetwork reads an agent's local information and emits
//!   the weights `W` and biases `B` of that agent's specialization layer
//!   `g = relu(s W + B)`, so each agent receives its own message.
//!
//! Both end in a shared distribution generator producing `(mu, sigma)` with
//! `sigma = sigma_min + softplus(raw)`, and a reparameterized sample
//! `z = mu + sigma * eps`.

use super::layers::Linear;
use super::{LocalInfo, SpecializedMessage};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How `z` is obtained from `(mu, sigma)`.
pub enum Noise<'r> {
    /// `z = mu`.
    Mean,
    /// Fresh standard-normal `eps` from the generator.
    Sample(&'r mut Rng),
    /// Caller-supplied `eps` with the same shape as `mu`.
    Given(Tensor<f64>),
}

/// Message nodes on a tape plus the noise used to draw `z` (if any).
pub struct MessageVars {
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
    pub eps: Option<Tensor<f64>>,
}

/// Shared head `g -> (mu, sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionGenerator {
    layer: Linear,
    pub z_dim: usize,
    pub sigma_min: f64,
}

impl DistributionGenerator {
    pub fn init<T: Scalar>(name: &str, in_dim: usize, z_dim: usize, sigma_min: f64, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        DistributionGenerator { layer: Linear::init(name, in_dim, 2 * z_dim, store, rng), z_dim, sigma_min }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, g: Var, noise: Noise<'_>) -> Result<MessageVars> {
        let d = self.z_dim;
        let out = self.layer.forward(tape, g)?;
        let mu = tape.slice(out, 0, d)?;
        let raw = tape.slice(out, d, 2 * d)?;
        let sp = tape.softplus(raw)?;
        let sigma = tape.add_scalar(sp, T::lit(self.sigma_min))?;
        let rows = tape.shape(mu)[0];
        let eps = match noise {
            Noise::Mean => None,
            Noise::Sample(rng) => {
                let v: Vec<f64> = (0..rows * d).map(|_| rng.normal()).collect();
                Some(Tensor::new(&[rows, d], v)?)
            }
            Noise::Given(e) => {
                if e.shape() != [rows, d] {
                    return Err(Error::shape("message noise", &[e.shape(), &[rows, d]]));
                }
                Some(e)
            }
        };
        let z = match &eps {
            None => mu,
            Some(e) => {
                let vals = e.values().iter().map(|&v| T::lit(v)).collect();
                let ev = tape.constant(Tensor::new(&[rows, d], vals)?);
                let scaled = tape.mul(sigma, ev)?;
                tape.add(mu, scaled)?
            }
        };
        Ok(MessageVars { mu, sigma, z, eps })
    }
}

/// Unified global information: `s -> relu(s W + b) -> (mu, sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Giu {
    encoder: Linear,
    pub dg: DistributionGenerator,
    pub state_dim: usize,
}

impl Giu {
    pub fn init<T: Scalar>(
        state_dim: usize,
        enc_dim: usize,
        z_dim: usize,
        sigma_min: f64,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Self {
        Giu {
            encoder: Linear::init("giu.enc", state_dim, enc_dim, store, rng),
            dg: DistributionGenerator::init("giu.dg", enc_dim, z_dim, sigma_min, store, rng),
            state_dim,
        }
    }

    /// One message per state row.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, state: Var, noise: Noise<'_>) -> Result<MessageVars> {
        if tape.shape(state).last() != Some(&self.state_dim) {
            return Err(Error::shape("giu_forward", &[tape.shape(state), &[self.state_dim]]));
        }
        let h = self.encoder.forward(tape, state)?;
        let h = tape.relu(h)?;
        self.dg.forward(tape, h, noise)
    }

    pub fn forward_one(&self, store: &ParamStore<f64>, state: &[f64], noise: Noise<'_>) -> Result<SpecializedMessage> {
        let mut tape = Tape::no_grad(store);
        let s = tape.constant(Tensor::row(state.to_vec()));
        let m = self.forward(&mut tape, s, noise)?;
        Ok(SpecializedMessage::read(&tape, &m))
    }
}

/// Global information specialization: agent-hyper network, agent
/// specialization layer with generated parameters, shared distribution
/// generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Gis {
    hyper_in: Linear,
    hyper_out: Linear,
    pub dg: DistributionGenerator,
    pub local_dim: usize,
    pub state_dim: usize,
    pub spec_dim: usize,
}

impl Gis {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        local_dim: usize,
        state_dim: usize,
        hyper_hidden: usize,
        spec_dim: usize,
        z_dim: usize,
        sigma_min: f64,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Self {
        Gis {
            hyper_in: Linear::init("gis.hyper.0", local_dim, hyper_hidden, store, rng),
            hyper_out: Linear::init("gis.hyper.1", hyper_hidden, state_dim * spec_dim + spec_dim, store, rng),
            dg: DistributionGenerator::init("gis.dg", spec_dim, z_dim, sigma_min, store, rng),
            local_dim,
            state_dim,
            spec_dim,
        }
    }

    /// Generated specialization parameters per row: `W` flattened row-major
    /// as `[rows, state_dim * spec_dim]` and `B` as `[rows, spec_dim]`.
    pub fn generated_params<T: Scalar>(&self, tape: &mut Tape<'_, T>, local: Var) -> Result<(Var, Var)> {
        if tape.shape(local).last() != Some(&self.local_dim) {
            return Err(Error::shape("gis_forward(local)", &[tape.shape(local), &[self.local_dim]]));
        }
        let h = self.hyper_in.forward(tape, local)?;
        let h = tape.relu(h)?;
        let wb = self.hyper_out.forward(tape, h)?;
        let split = self.state_dim * self.spec_dim;
        let w = tape.slice(wb, 0, split)?;
        let b = tape.slice(wb, split, split + self.spec_dim)?;
        Ok((w, b))
    }

    /// Rows of `local` and `state` are paired (one row per agent).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, local: Var, state: Var, noise: Noise<'_>) -> Result<MessageVars> {
        if tape.shape(state).last() != Some(&self.state_dim) || tape.shape(state)[0] != tape.shape(local)[0] {
            return Err(Error::shape("gis_forward(state)", &[tape.shape(local), tape.shape(state)]));
        }
        let (w, b) = self.generated_params(tape, local)?;
        let g = tape.batched_matvec(state, w)?;
        let g = tape.add(g, b)?;
        let g = tape.relu(g)?;
        self.dg.forward(tape, g, noise)
    }

    pub fn forward_one(&self, store: &ParamStore<f64>, local: &LocalInfo, state: &[f64], noise: Noise<'_>) -> Result<SpecializedMessage> {
        let mut tape = Tape::no_grad(store);
        let l = tape.constant(Tensor::row(local.to_vec()));
        let s = tape.constant(Tensor::row(state.to_vec()));
        let m = self.forward(&mut tape, l, s, noise)?;
        Ok(SpecializedMessage::read(&tape, &m))
    }
}

/// Message source selected by a learner variant.
#[derive(Debug, Clone, PartialEq)]
pub enum MessageModule {
    None,
    Unified(Giu),
    Specialized(Gis),
}

impl MessageModule {
    pub fn z_dim(&self) -> usize {
        match self {
            MessageModule::None => 0,
            MessageModule::Unified(g) => g.dg.z_dim,
            MessageModule::Specialized(g) => g.dg.z_dim,
        }
    }

    /// Parameter prefix of the teacher module, if any.
    pub fn prefix(&self) -> Option<&'static str> {
        match self {
            MessageModule::None => None,
            MessageModule::Unified(_) => Some("giu."),
            MessageModule::Specialized(_) => Some("gis."),
        }
    }

    /// Messages for `n_agents` agents per group. `local` is `[groups *
    /// n_agents, local_dim]` (agent-major within a group) and `state` is
    /// `[groups, state_dim]`. Unified messages are computed once per group
    /// and repeated, so all agents of a group share the same noise draw.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        local: Var,
        state: Var,
        n_agents: usize,
        noise: Noise<'_>,
    ) -> Result<Option<MessageVars>> {
        let groups = tape.shape(state)[0];
        let expand: Vec<usize> = (0..groups * n_agents).map(|r| r / n_agents).collect();
        Ok(match self {
            MessageModule::None => None,
            MessageModule::Unified(giu) => {
                let m = giu.forward(tape, state, noise)?;
                Some(MessageVars {
                    mu: tape.gather_rows(m.mu, &expand)?,
                    sigma: tape.gather_rows(m.sigma, &expand)?,
                    z: tape.gather_rows(m.z, &expand)?,
                    eps: m.eps,
                })
            }
            MessageModule::Specialized(gis) => {
                let s = tape.gather_rows(state, &expand)?;
                Some(gis.forward(tape, local, s, noise)?)
            }
        })
    }
}
