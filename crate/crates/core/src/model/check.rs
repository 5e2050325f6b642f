use super::params::TransformerParams;
use super::transformer::Net;
use crate::autodiff::{relative_error, Graph, Var};
use crate::error::{Error, Result};

/// Central finite-difference check of a scalar function of all model
/// parameters. Returns the worst relative error per parameter tensor.
///
/// `f` is evaluated in eval mode, so dropout is inactive. With
/// `max_coords = Some(k)` only `k` evenly strided coordinates per tensor are
/// probed.
pub fn param_grad_check<F>(
    params: &TransformerParams,
    f: F,
    step: f64,
    max_coords: Option<usize>,
) -> Result<Vec<(String, f64)>>
where
    F: Fn(&Net, &mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let net = Net::bind(params, &mut g, true)?;
        let out = f(&net, &mut g)?;
        g.backward(out)?;
        net.grads(&g)
    };
    let eval = |p: &TransformerParams| -> Result<f64> {
        let mut g = Graph::new();
        let net = Net::bind(p, &mut g, false)?;
        let out = f(&net, &mut g)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference probe".into()));
        }
        Ok(v)
    };
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for ti in 0..params.len() {
        let n = params.tensors()[ti].len();
        let stride = match max_coords {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        for idx in (0..n).step_by(stride) {
            let orig = params.tensors()[ti].data()[idx];
            probe.tensors_mut()[ti].data_mut()[idx] = orig + step;
            let plus = eval(&probe)?;
            probe.tensors_mut()[ti].data_mut()[idx] = orig - step;
            let minus = eval(&probe)?;
            probe.tensors_mut()[ti].data_mut()[idx] = orig;
            worst = worst.max(relative_error(analytic[ti][idx], (plus - minus) / (2.0 * step)));
        }
        out.push((params.names()[ti].clone(), worst));
    }
    Ok(out)
}
