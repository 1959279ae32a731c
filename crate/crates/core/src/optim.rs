use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const DEFAULT_LR: f64 = 5e-4;

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update to every entry of `store` and clears the gradient
    /// buffers. Every registered parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for (name, t) in store.iter_mut() {
            let g = t.grad.take().expect("checked above");
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((p, &gi), mi), vi) in t.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
