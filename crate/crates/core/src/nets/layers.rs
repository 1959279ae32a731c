use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let vals = (0..n).map(|_| T::lit(rng.uniform_range(-bound, bound))).collect();
    Tensor::new(shape, vals).expect("shape")
}

/// Affine layer `y = x W + b` with `W: [in, out]`, stored as `<name>.w` / `<name>.b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear { w: format!("{name}.w"), b: format!("{name}.b"), in_dim, out_dim }
    }

    /// Registers the layer with uniform(+-1/sqrt(in)) weights and biases.
    pub fn init<T: Scalar>(name: &str, in_dim: usize, out_dim: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let layer = Linear::new(name, in_dim, out_dim);
        let bound = 1.0 / (in_dim as f64).sqrt();
        store.insert(layer.w.clone(), uniform(rng, &[in_dim, out_dim], bound));
        store.insert(layer.b.clone(), uniform(rng, &[out_dim], bound));
        layer
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w)?;
        let b = tape.param(&self.b)?;
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

/// GRU cell with gate order `[r, z, n]`:
///
/// ```text
/// r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = n + z * (h - n)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn init<T: Scalar>(name: &str, in_dim: usize, hidden_dim: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        GruCell {
            input: Linear::init(&format!("{name}.ih"), in_dim, 3 * hidden_dim, store, rng),
            hidden: Linear::init(&format!("{name}.hh"), hidden_dim, 3 * hidden_dim, store, rng),
            hidden_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, h: Var) -> Result<Var> {
        let d = self.hidden_dim;
        let gi = self.input.forward(tape, x)?;
        let gh = self.hidden.forward(tape, h)?;
        let (i_r, i_z, i_n) = (tape.slice(gi, 0, d)?, tape.slice(gi, d, 2 * d)?, tape.slice(gi, 2 * d, 3 * d)?);
        let (h_r, h_z, h_n) = (tape.slice(gh, 0, d)?, tape.slice(gh, d, 2 * d)?, tape.slice(gh, 2 * d, 3 * d)?);
        let r_pre = tape.add(i_r, h_r)?;
        let r = tape.sigmoid(r_pre)?;
        let z_pre = tape.add(i_z, h_z)?;
        let z = tape.sigmoid(z_pre)?;
        let rh = tape.mul(r, h_n)?;
        let n_pre = tape.add(i_n, rh)?;
        let n = tape.tanh(n_pre)?;
        let h_minus_n = tape.sub(h, n)?;
        let gated = tape.mul(z, h_minus_n)?;
        tape.add(n, gated)
    }
}

/// Stack of affine layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init<T: Scalar>(name: &str, widths: &[usize], store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(&format!("{name}.{i}"), w[0], w[1], store, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}
