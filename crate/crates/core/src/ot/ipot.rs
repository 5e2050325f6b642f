use serde::{Deserialize, Serialize};

use super::cost::{check_cost, check_marginal, transport_cost};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Proximal point parameters: step `1/beta`, `outer` proximal steps of
/// `inner` Sinkhorn-style scaling sweeps each.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpotParams {
    pub beta: f64,
    pub outer: usize,
    pub inner: usize,
}

impl Default for IpotParams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            outer: 1000,
            inner: 20,
        }
    }
}

impl IpotParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("ipot beta must be positive, got {}", self.beta)));
        }
        if self.outer == 0 || self.inner == 0 {
            return Err(Error::Config("ipot iteration counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transport {
    pub plan: Tensor,
    pub distance: f64,
}

/// Inexact proximal point OT with arbitrary marginals. Returns the final
/// iterate and its transport cost.
pub fn ipot(c: &Tensor, mu: &[f64], nu: &[f64], params: IpotParams) -> Result<Transport> {
    params.validate()?;
    let (n, m) = check_cost(c)?;
    check_marginal("mu", mu, n)?;
    check_marginal("nu", nu, m)?;
    let a: Vec<f64> = c.data().iter().map(|&v| (-v / params.beta).exp()).collect();
    let mut t = vec![1.0; n * m];
    let mut sigma = vec![1.0 / m as f64; m];
    let mut delta = vec![0.0; n];
    let mut q = vec![0.0; n * m];
    for _ in 0..params.outer {
        for k in 0..n * m {
            q[k] = a[k] * t[k];
        }
        for _ in 0..params.inner {
            for i in 0..n {
                let row = &q[i * m..(i + 1) * m];
                let s: f64 = row.iter().zip(&sigma).map(|(q, s)| q * s).sum();
                delta[i] = if mu[i] == 0.0 { 0.0 } else { mu[i] / s };
            }
            for j in 0..m {
                let s: f64 = (0..n).map(|i| q[i * m + j] * delta[i]).sum();
                sigma[j] = if nu[j] == 0.0 { 0.0 } else { nu[j] / s };
            }
        }
        for i in 0..n {
            for j in 0..m {
                t[i * m + j] = delta[i] * q[i * m + j] * sigma[j];
            }
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("ipot (beta {} too small for the cost scale)", params.beta)));
        }
    }
    let plan = Tensor::matrix(n, m, t)?;
    let distance = transport_cost(&plan, c);
    Ok(Transport { plan, distance })
}
