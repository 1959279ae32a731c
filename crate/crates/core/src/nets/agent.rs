use super::layers::{GruCell, Linear};
use super::{AgentHidden, LocalInfo};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Recurrent per-agent network shared by all agents:
/// `local -> fc(relu) -> GRU -> [h, message] -> head`.
///
/// The head emits Q-values for value-decomposition learners and action
/// logits when used as an actor.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNet {
    fc: Linear,
    gru: GruCell,
    head: Linear,
    pub local_dim: usize,
    pub hidden_dim: usize,
    pub message_dim: usize,
    pub n_actions: usize,
}

impl AgentNet {
    /// `message_dim = 0` builds the plain (no global information) network.
    pub fn init<T: Scalar>(
        prefix: &str,
        local_dim: usize,
        hidden_dim: usize,
        message_dim: usize,
        n_actions: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Self {
        AgentNet {
            fc: Linear::init(&format!("{prefix}.fc"), local_dim, hidden_dim, store, rng),
            gru: GruCell::init(&format!("{prefix}.gru"), hidden_dim, hidden_dim, store, rng),
            head: Linear::init(&format!("{prefix}.head"), hidden_dim + message_dim, n_actions, store, rng),
            local_dim,
            hidden_dim,
            message_dim,
            n_actions,
        }
    }

    /// One recurrent step for a batch of rows. Returns `(outputs, new_hidden)`.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<'_, T>, local: Var, hidden: Var, message: Option<Var>) -> Result<(Var, Var)> {
        match (message, self.message_dim) {
            (None, 0) => {}
            (Some(m), d) if d > 0 && tape.shape(m).last() == Some(&d) => {}
            (m, d) => {
                let got = m.map(|m| tape.shape(m).to_vec()).unwrap_or_default();
                return Err(Error::Shape { op: "agent_forward(message)", shapes: vec![vec![d], got] });
            }
        }
        let x = self.fc.forward(tape, local)?;
        let x = tape.relu(x)?;
        let h = self.gru.forward(tape, x, hidden)?;
        let feat = match message {
            Some(m) => tape.concat(&[h, m])?,
            None => h,
        };
        let out = self.head.forward(tape, feat)?;
        Ok((out, h))
    }

    /// Unbatched convenience: evaluates a single agent step without
    /// recording gradients.
    pub fn forward_one(
        &self,
        store: &ParamStore<f64>,
        local: &LocalInfo,
        hidden: &AgentHidden,
        message: Option<&[f64]>,
    ) -> Result<(Vec<f64>, AgentHidden)> {
        if local.dim() != self.local_dim {
            return Err(Error::shape("agent_forward(local)", &[&[self.local_dim], &[local.dim()]]));
        }
        if hidden.h.len() != self.hidden_dim {
            return Err(Error::shape("agent_forward(hidden)", &[&[self.hidden_dim], &[hidden.h.len()]]));
        }
        let mut tape = Tape::no_grad(store);
        let x = tape.constant(Tensor::row(local.to_vec()));
        let h = tape.constant(Tensor::row(hidden.h.clone()));
        let m = message.map(|m| tape.constant(Tensor::row(m.to_vec())));
        let (q, h2) = self.step(&mut tape, x, h, m)?;
        Ok((tape.value(q).values().to_vec(), AgentHidden { h: tape.value(h2).values().to_vec() }))
    }
}
