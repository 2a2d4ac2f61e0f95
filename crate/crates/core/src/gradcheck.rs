//! Central finite-difference oracle for graph gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor in the relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// Max over coordinates of `|analytic - numeric| / (|analytic| + |numeric| + floor)`
/// for a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// As [`finite_diff_check`] for a scalar function of several tensors.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, out))
    };
    let (_, analytic) = eval(xs, true)?;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for (ti, t) in xs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            probe[ti].data_mut()[i] = orig + eps;
            let (fp, _) = eval(&probe, false)?;
            probe[ti].data_mut()[i] = orig - eps;
            let (fm, _) = eval(&probe, false)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
