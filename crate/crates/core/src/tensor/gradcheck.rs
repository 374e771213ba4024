//! Central-difference gradient verification in 64-bit precision.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max relative error between tape gradients of the scalar function `f` at
/// `x` and central finite differences with step `h`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    gradcheck_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}

/// [`gradcheck`] over several inputs at once; every element of every input
/// is perturbed.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::NonScalar(g.value(out).shape().to_vec()));
        }
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + h;
            let (gp, _, op) = eval(&probe, false)?;
            probe[i].data_mut()[e] = orig - h;
            let (gm, _, om) = eval(&probe, false)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i].data()[e], numeric));
        }
    }
    Ok(worst)
}
