//! Neural components: recurrent agent network, unified and specialized
//! message generators, the distillation student, mixers and the critic.
//!
//! Parameter names are prefixed by component: `agent.`, `actor.`, `giu.`,
//! `gis.`, `student.`, `mixer.`, `critic.`.

pub mod agent;
pub mod layers;
pub mod message;
pub mod mixer;
pub mod student;

use serde::{Deserialize, Serialize};

pub use agent::AgentNet;
pub use message::{DistributionGenerator, Giu, Gis, MessageModule, MessageVars, Noise};
pub use mixer::{vdn_mix, Critic, Mixer, QmixNet};
pub use student::Student;

use crate::scalar::Scalar;
use crate::tape::Tape;

/// Network widths. Defaults: d_h = 64, d_g = 32, d_z = 8, mixing embed 32,
/// hypernetwork hidden 64, sigma floor 0.05.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetDims {
    pub d_z: usize,
    pub d_h: usize,
    pub d_g: usize,
    pub sigma_min: f64,
    pub mix_embed: usize,
    pub hyper_hidden: usize,
    pub student_hidden: usize,
    pub critic_hidden: usize,
}

impl Default for NetDims {
    fn default() -> Self {
        NetDims {
            d_z: 8,
            d_h: 64,
            d_g: 32,
            sigma_min: 0.05,
            mix_embed: 32,
            hyper_hidden: 64,
            student_hidden: 64,
            critic_hidden: 64,
        }
    }
}

/// What an agent may see at decentralized execution: its observation, a
/// one-hot of its previous action (all zeros at t = 0) and a one-hot of its
/// index.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalInfo {
    pub obs: Vec<f64>,
    pub last_action: Vec<f64>,
    pub agent_id: Vec<f64>,
}

impl LocalInfo {
    pub fn new(obs: Vec<f64>, last_action: Option<usize>, n_actions: usize, agent: usize, n_agents: usize) -> Self {
        let mut la = vec![0.0; n_actions];
        if let Some(a) = last_action {
            la[a] = 1.0;
        }
        let mut id = vec![0.0; n_agents];
        id[agent] = 1.0;
        LocalInfo { obs, last_action: la, agent_id: id }
    }

    pub fn dim(&self) -> usize {
        self.obs.len() + self.last_action.len() + self.agent_id.len()
    }

    /// Concatenation `[obs, last_action, agent_id]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.obs);
        v.extend_from_slice(&self.last_action);
        v.extend_from_slice(&self.agent_id);
        v
    }

    pub fn write_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.obs);
        out.extend_from_slice(&self.last_action);
        out.extend_from_slice(&self.agent_id);
    }
}

/// Recurrent encoding of an agent's local-information trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentHidden {
    pub h: Vec<f64>,
}

impl AgentHidden {
    pub fn zeros(d_h: usize) -> Self {
        AgentHidden { h: vec![0.0; d_h] }
    }
}

/// Materialized message: distribution parameters and the drawn `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecializedMessage {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
}

impl SpecializedMessage {
    pub fn read<T: Scalar>(tape: &Tape<'_, T>, m: &MessageVars) -> Self {
        let get = |v| tape.value(v).values().iter().map(|x: &T| x.to_f64_lossy()).collect();
        SpecializedMessage { mu: get(m.mu), sigma: get(m.sigma), z: get(m.z) }
    }
}

#[cfg(test)]
mod tests;
