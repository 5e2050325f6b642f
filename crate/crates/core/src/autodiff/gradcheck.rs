//! Central finite-difference checks for analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error used by every gradient check in this crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
    let out = f(&mut g, &vars)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("finite-difference probe".into()));
    }
    Ok(v)
}

/// Max relative error between the analytic gradient of scalar `f` at `x` and
/// its central difference with half-width `step`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let errs = finite_diff_check_all(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step, None)?;
    Ok(errs[0])
}

/// Per-input max relative error for a scalar function of several tensors.
///
/// With `max_coords = Some(k)`, only `k` evenly strided coordinates of each
/// input are probed.
pub fn finite_diff_check_all<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut probe = inputs.to_vec();
    let mut worst = Vec::with_capacity(inputs.len());
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.len();
        let stride = match max_coords {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        let mut max_err: f64 = 0.0;
        for idx in (0..n).step_by(stride) {
            let orig = t.data()[idx];
            probe[ti].data_mut()[idx] = orig + step;
            let plus = evaluate(&f, &probe)?;
            probe[ti].data_mut()[idx] = orig - step;
            let minus = evaluate(&f, &probe)?;
            probe[ti].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_err = max_err.max(relative_error(analytic[ti][idx], numeric));
        }
        worst.push(max_err);
    }
    Ok(worst)
}
