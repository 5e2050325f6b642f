use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `C_ij = 1 - cos(x_i, y_j)`, clamped to `[0, 2]`.
pub fn cosine_cost(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims();
    let (m, dy) = y.dims();
    if d != dy {
        return Err(Error::shape("cosine_cost", format!("widths {d} and {dy}")));
    }
    let norms = |t: &Tensor, rows: usize| -> Result<Vec<f64>> {
        (0..rows)
            .map(|i| {
                let r = &t.data()[i * d..(i + 1) * d];
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 && norm.is_finite() {
                    Ok(norm)
                } else {
                    Err(Error::Invalid(format!("row {i} has zero or non-finite norm")))
                }
            })
            .collect()
    };
    let nx = norms(x, n)?;
    let ny = norms(y, m)?;
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let xi = &x.data()[i * d..(i + 1) * d];
        for j in 0..m {
            let yj = &y.data()[j * d..(j + 1) * d];
            let dot: f64 = xi.iter().zip(yj).map(|(a, b)| a * b).sum();
            c[i * m + j] = (1.0 - dot / (nx[i] * ny[j])).clamp(0.0, 2.0);
        }
    }
    Tensor::matrix(n, m, c)
}

/// `n` equal weights.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub(crate) fn check_marginal(name: &str, w: &[f64], len: usize) -> Result<()> {
    if w.len() != len {
        return Err(Error::shape("transport", format!("{name} has {} weights for {len} points", w.len())));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Invalid(format!("{name} has negative or non-finite weights")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

pub(crate) fn check_cost(c: &Tensor) -> Result<(usize, usize)> {
    let (n, m) = c.dims();
    if n == 0 || m == 0 || c.shape().len() != 2 {
        return Err(Error::shape("transport", format!("cost shape {:?}", c.shape())));
    }
    if !c.is_finite() {
        return Err(Error::Invalid("non-finite cost".into()));
    }
    Ok((n, m))
}

/// Frobenius inner product of a plan with a cost matrix.
pub fn transport_cost(plan: &Tensor, c: &Tensor) -> f64 {
    plan.data().iter().zip(c.data()).map(|(t, c)| t * c).sum()
}

/// `||row_sums - mu||_1 + ||col_sums - nu||_1`.
pub fn marginal_violation(plan: &Tensor, mu: &[f64], nu: &[f64]) -> f64 {
    let (n, m) = plan.dims();
    let p = plan.data();
    let rows: f64 = (0..n)
        .map(|i| (p[i * m..(i + 1) * m].iter().sum::<f64>() - mu[i]).abs())
        .sum();
    let cols: f64 = (0..m)
        .map(|j| ((0..n).map(|i| p[i * m + j]).sum::<f64>() - nu[j]).abs())
        .sum();
    rows + cols
}
