//! Central finite-difference oracle for the autodiff engine.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    pub tol: f64,
    /// Name/coordinate of the worst mismatch.
    pub worst: String,
}

impl GradReport {
    fn new(tol: f64) -> Self {
        GradReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, tol, worst: String::new() }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn flagged(&self) -> bool {
        !self.passed()
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = label();
        }
    }
}

/// Magnitude below which errors are measured absolutely. Central
/// differences at h = 1e-5 carry roughly 1e-10 of rounding noise.
pub const REL_FLOOR: f64 = 1e-6;

fn eval_scalar<T: Scalar>(tape: Tape<'_, T>, out: Var, ctx: &str) -> Result<f64> {
    let t = tape.value(out);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    let v = t.item().to_f64_lossy();
    if !v.is_finite() {
        return Err(Error::NonFinite(ctx.to_string()));
    }
    Ok(v)
}

/// Compares d f / d x from autodiff against central differences with step
/// `h`, for a scalar-valued `f` of a single tensor argument.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64, tol: f64) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.set_check_finite(true);
    let xv = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = match grads.leaf(xv) {
        Some(g) => g.iter().map(|v| v.to_f64_lossy()).collect(),
        None => vec![0.0; x.len()],
    };

    let mut report = GradReport::new(tol);
    for i in 0..x.len() {
        let probe = |delta: f64| -> Result<f64> {
            let mut xp = x.clone();
            xp.values_mut()[i] += T::lit(delta);
            let mut tape = Tape::new();
            tape.set_check_finite(true);
            let v = tape.constant(xp);
            let out = f(&mut tape, v)?;
            eval_scalar(tape, out, "grad_check probe")
        };
        let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
        report.record(|| format!("x[{i}]"), analytic[i], numeric);
    }
    Ok(report)
}

/// Same comparison with respect to the entries of `store` whose names start
/// with `prefix`. Tensors with more than `max_coords` elements are checked
/// on a random subset of coordinates drawn from `rng`.
pub fn grad_check_params<T, F>(
    f: F,
    store: &ParamStore<T>,
    prefix: &str,
    h: f64,
    tol: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        tape.set_check_finite(true);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };

    let mut report = GradReport::new(tol);
    let mut work = store.clone();
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::MissingParam(format!("{prefix}*")));
    }
    for name in names {
        let len = store.get(&name)?.len();
        let analytic: Vec<f64> = match grads.param(&name) {
            Some(g) => g.iter().map(|v| v.to_f64_lossy()).collect(),
            None => vec![0.0; len],
        };
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            (0..max_coords).map(|_| rng.below(len)).collect()
        };
        for i in coords {
            let orig = store.get(&name)?.values()[i];
            let mut probe = |delta: f64| -> Result<f64> {
                work.get_mut(&name)?.values_mut()[i] = orig + T::lit(delta);
                let mut tape = Tape::no_grad(&work);
                tape.set_check_finite(true);
                let out = f(&mut tape)?;
                eval_scalar(tape, out, "grad_check_params probe")
            };
            let plus = probe(h)?;
            let minus = probe(-h)?;
            work.get_mut(&name)?.values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(|| format!("{name}[{i}]"), analytic[i], numeric);
        }
    }
    Ok(report)
}
