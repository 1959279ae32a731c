use super::layers::Linear;
use super::LocalInfo;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Deterministic two-layer MLP `local -> relu -> z'`. Its only input is the
/// agent's local information.
#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    fc1: Linear,
    fc2: Linear,
    pub local_dim: usize,
    pub z_dim: usize,
}

impl Student {
    pub fn init<T: Scalar>(local_dim: usize, hidden: usize, z_dim: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        Student {
            fc1: Linear::init("student.fc1", local_dim, hidden, store, rng),
            fc2: Linear::init("student.fc2", hidden, z_dim, store, rng),
            local_dim,
            z_dim,
        }
    }

    /// Same layout as [`Student::init`] with every parameter set to zero.
    pub fn init_zeros<T: Scalar>(local_dim: usize, hidden: usize, z_dim: usize, store: &mut ParamStore<T>) -> Self {
        let s = Student::init(local_dim, hidden, z_dim, store, &mut Rng::new(0));
        for (name, t) in store.iter_mut() {
            if name.starts_with("student.") {
                t.values_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        s
    }

    /// Rebinds to parameters already present in a store.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Result<Self> {
        let w1 = store.get("student.fc1.w")?;
        let w2 = store.get("student.fc2.w")?;
        let (local_dim, hidden) = (w1.shape()[0], w1.shape()[1]);
        let z_dim = w2.shape()[1];
        Ok(Student {
            fc1: Linear::new("student.fc1", local_dim, hidden),
            fc2: Linear::new("student.fc2", hidden, z_dim),
            local_dim,
            z_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, local: Var) -> Result<Var> {
        if tape.shape(local).last() != Some(&self.local_dim) {
            return Err(Error::shape("student_forward", &[tape.shape(local), &[self.local_dim]]));
        }
        let h = self.fc1.forward(tape, local)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, h)
    }

    pub fn forward_one(&self, store: &ParamStore<f64>, local: &LocalInfo) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad(store);
        let x = tape.constant(Tensor::row(local.to_vec()));
        let z = self.forward(&mut tape, x)?;
        Ok(tape.value(z).values().to_vec())
    }
}
