use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::nets::{AgentNet, Critic, Gis, Giu, Mixer, MessageModule, NetDims, Noise, QmixNet};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::variant::{MessageKind, MixerKind, Variant};

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Mixer(Mixer),
    Critic(Critic),
}

/// Everything trained in stage 1 for one variant: the shared agent network,
/// the message module (teacher) and the mixer or critic.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    pub variant: Variant,
    pub spec: EnvSpec,
    pub dims: NetDims,
    pub agent: AgentNet,
    pub message: MessageModule,
    pub head: Head,
}

/// Output of one batched agent step.
pub struct StepVars {
    /// Q-values or action logits, `[rows, n_actions]`.
    pub out: Var,
    pub hidden: Var,
    pub message: Option<crate::nets::MessageVars>,
}

impl Stage1Model {
    pub fn init<T: Scalar>(variant: Variant, spec: &EnvSpec, dims: &NetDims, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let ld = spec.local_dim();
        let sd = spec.state_dim;
        let message = match variant.message() {
            MessageKind::None => MessageModule::None,
            MessageKind::Unified => MessageModule::Unified(Giu::init(sd, dims.d_g, dims.d_z, dims.sigma_min, store, rng)),
            MessageKind::Specialized => MessageModule::Specialized(Gis::init(
                ld,
                sd,
                dims.hyper_hidden,
                dims.d_g,
                dims.d_z,
                dims.sigma_min,
                store,
                rng,
            )),
        };
        let prefix = if variant.is_actor_critic() { "actor" } else { "agent" };
        let agent = AgentNet::init(prefix, ld, dims.d_h, message.z_dim(), spec.n_actions, store, rng);
        let head = match variant.mixer() {
            Some(MixerKind::Vdn) => Head::Mixer(Mixer::Vdn),
            Some(MixerKind::Qmix) => {
                Head::Mixer(Mixer::Qmix(QmixNet::init(spec.n_agents, sd, dims.mix_embed, dims.hyper_hidden, store, rng)))
            }
            None => Head::Critic(Critic::init(sd, dims.critic_hidden, store, rng)),
        };
        Stage1Model { variant, spec: spec.clone(), dims: dims.clone(), agent, message, head }
    }

    /// Network structure without keeping any parameter values; used when
    /// parameters come from a checkpoint.
    pub fn layout(variant: Variant, spec: &EnvSpec, dims: &NetDims) -> (Self, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let model = Self::init(variant, spec, dims, &mut store, &mut Rng::new(0));
        (model, store)
    }

    /// Fails unless `store` holds every parameter this model needs, with the
    /// expected shapes.
    pub fn check_store(&self, store: &ParamStore<f64>) -> Result<()> {
        let (_, reference) = Self::layout(self.variant, &self.spec, &self.dims);
        for (name, t) in reference.iter() {
            let got = store.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.spec.n_agents
    }

    pub fn mixer(&self) -> Option<&Mixer> {
        match &self.head {
            Head::Mixer(m) => Some(m),
            Head::Critic(_) => None,
        }
    }

    pub fn critic(&self) -> Option<&Critic> {
        match &self.head {
            Head::Critic(c) => Some(c),
            Head::Mixer(_) => None,
        }
    }

    /// One agent step for `groups` parallel episodes. `local` is
    /// `[groups * n_agents, local_dim]`, `state` is `[groups, state_dim]`.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<'_, T>, local: Var, state: Var, hidden: Var, noise: Noise<'_>) -> Result<StepVars> {
        let message = self.message.forward(tape, local, state, self.n_agents(), noise)?;
        let (out, hidden) = self.agent.step(tape, local, hidden, message.as_ref().map(|m| m.z))?;
        Ok(StepVars { out, hidden, message })
    }

    /// Width of the noise record kept per step for `groups = 1`.
    pub fn noise_dim(&self) -> usize {
        match self.message {
            MessageModule::None => 0,
            MessageModule::Unified(_) => self.dims.d_z,
            MessageModule::Specialized(_) => self.n_agents() * self.dims.d_z,
        }
    }
}
