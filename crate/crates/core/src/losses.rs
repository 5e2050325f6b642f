//! Training objective: smoothed likelihood, table-text disagreement and
//! OT content matching.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::model::LOG_FLOOR;
use crate::ot::{ipot, uniform, IpotParams};

/// Which representation the disagreement loss averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Composed input embeddings.
    EmbeddingLayer,
    /// Final encoder states; the reference text is run through the same encoder.
    #[default]
    TopLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub ot_start_step: u64,
    pub embedding_source: EmbeddingSource,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            gamma: 0.1,
            ot_start_step: 0,
            embedding_source: EmbeddingSource::TopLayer,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} = {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// One step of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub mle: f64,
    /// Unsmoothed token NLL, for perplexity.
    pub nll: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub disagree: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ot: Option<f64>,
    /// Examples whose OT term was skipped for an empty keyword side.
    #[serde(skip_serializing_if = "is_zero", default)]
    pub ot_degenerate: usize,
    pub total: f64,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

pub struct Mle {
    pub loss: Var,
    pub nll: f64,
    pub tokens: usize,
}

/// Label-smoothed NLL, averaged over positions whose target is not `<pad>`.
///
/// `probs` is `N x V` with one row per target position. The smoothed target
/// puts `1 - eps` on the gold token and `eps / (V - 1)` on every other one.
pub fn mle_loss(g: &mut Graph, probs: Var, targets: &[usize], eps: f64) -> Result<Mle> {
    let (n, v) = g.dims(probs);
    if targets.len() != n {
        return Err(Error::shape("mle_loss", format!("{} targets for {n} rows", targets.len())));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Invalid(format!("label smoothing {eps} outside [0, 1)")));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Invalid(format!("target id {bad} outside vocabulary of {v}")));
    }
    let tokens = targets.iter().filter(|&&t| t != PAD).count();
    if tokens == 0 {
        return Err(Error::Invalid("no non-pad target positions".into()));
    }
    let off = eps / (v - 1) as f64;
    let mut q = vec![0.0; n * v];
    let mut nll = 0.0;
    let p = g.value(probs);
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        q[i * v..(i + 1) * v].iter_mut().for_each(|x| *x = off);
        q[i * v + t] = 1.0 - eps;
        nll -= p[i * v + t].max(LOG_FLOOR).ln();
    }
    let logp = g.log_floor(probs, LOG_FLOOR)?;
    let weighted = g.mul_const(logp, q)?;
    let total = g.sum(weighted)?;
    let loss = g.scale(total, -1.0 / tokens as f64)?;
    Ok(Mle {
        loss,
        nll: nll / tokens as f64,
        tokens,
    })
}

/// Row-averaging matrix: output row `i` is the mean of `groups[i]`.
fn averaging(groups: &[Vec<usize>], n: usize) -> Result<Tensor> {
    let mut a = vec![0.0; groups.len() * n];
    for (i, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::Invalid(format!("sequence {i} is empty")));
        }
        let w = 1.0 / rows.len() as f64;
        for &r in rows {
            a[i * n + r] += w;
        }
    }
    Tensor::matrix(groups.len(), n, a)
}

/// Mean over sequences of `|mean(table rows) - mean(text rows)|^2`.
///
/// `table_rows[i]` and `text_rows[i]` select the rows of sequence `i` in
/// `table` and `text`; a single sequence gives the plain squared distance.
pub fn disagreement_loss(
    g: &mut Graph,
    table: Var,
    table_rows: &[Vec<usize>],
    text: Var,
    text_rows: &[Vec<usize>],
) -> Result<Var> {
    if table_rows.len() != text_rows.len() || table_rows.is_empty() {
        return Err(Error::Invalid(format!(
            "{} table sequences against {} texts",
            table_rows.len(),
            text_rows.len()
        )));
    }
    let a = averaging(table_rows, g.dims(table).0)?;
    let b = averaging(text_rows, g.dims(text).0)?;
    let a = g.constant(&a);
    let b = g.constant(&b);
    let ma = g.matmul(a, table)?;
    let mb = g.matmul(b, text)?;
    let diff = g.sub(ma, mb)?;
    let sq = g.sum_sq(diff)?;
    g.scale(sq, 1.0 / table_rows.len() as f64)
}

/// `1 - cos(x_i, y_j)` as a graph node.
pub fn cosine_cost_graph(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let xn = g.normalize_rows(x)?;
    let yn = g.normalize_rows(y)?;
    let cos = g.matmul_nt(xn, yn)?;
    g.affine(cos, -1.0, 1.0)
}

/// `sum_ij U_ij C_ij` with `U` held constant.
pub fn ot_loss_with_plan(g: &mut Graph, x: Var, y: Var, plan: &Tensor) -> Result<Var> {
    let c = cosine_cost_graph(g, x, y)?;
    if g.shape(c) != plan.shape() {
        return Err(Error::shape("ot_loss", format!("plan {:?} for cost {:?}", plan.shape(), g.shape(c))));
    }
    let weighted = g.mul_const(c, plan.data().to_vec())?;
    g.sum(weighted)
}

/// OT distance between two embedding sets with uniform weights. The IPOT
/// plan is computed on the current values and frozen, so gradients reach
/// the embeddings only through the cost matrix.
pub fn ot_loss(g: &mut Graph, x: Var, y: Var, params: IpotParams) -> Result<Var> {
    let plan = ot_plan(g, x, y, params)?;
    ot_loss_with_plan(g, x, y, &plan)
}

/// IPOT plan between the current values of `x` and `y`, uniform weights.
pub fn ot_plan(g: &mut Graph, x: Var, y: Var, params: IpotParams) -> Result<Tensor> {
    let (n, m) = (g.dims(x).0, g.dims(y).0);
    if n == 0 || m == 0 {
        return Err(Error::Invalid("OT needs non-empty point sets".into()));
    }
    let c = cosine_cost_graph(g, x, y)?;
    let values = g.tensor(c);
    Ok(ipot(&values, &uniform(n), &uniform(m), params)?.plan)
}

/// `mle + lambda * disagree + gamma * ot`; absent parts contribute nothing.
pub fn total_loss(
    g: &mut Graph,
    mle: Var,
    disagree: Option<Var>,
    ot: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let mut total = mle;
    if let Some(d) = disagree {
        let d = g.scale(d, weights.lambda)?;
        total = g.add(total, d)?;
    }
    if let Some(o) = ot {
        let o = g.scale(o, weights.gamma)?;
        total = g.add(total, o)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_diff_check_all;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mle_value(probs: Vec<f64>, v: usize, targets: &[usize], eps: f64) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(&Tensor::matrix(targets.len(), v, probs).unwrap());
        let m = mle_loss(&mut g, p, targets, eps).unwrap();
        g.scalar(m.loss)
    }

    #[test]
    fn mle_examples() {
        assert_eq!(mle_value(vec![0.0, 0.0, 0.0, 0.0, 1.0], 5, &[4], 0.0), 0.0);
        let u = mle_value(vec![0.2; 10], 5, &[4, 3], 0.0);
        assert!((u - 5f64.ln()).abs() < 1e-12);
        let h = mle_value(vec![0.025, 0.025, 0.9, 0.025, 0.025], 5, &[2], 0.1);
        let want = -(0.9 * 0.9f64.ln() + 0.1 * 0.025f64.ln());
        assert!((h - want).abs() < 1e-12);
        assert!((h - 0.46371).abs() < 1e-5);
    }

    #[test]
    fn mle_skips_pads() {
        let row = vec![0.1, 0.2, 0.3, 0.4, 0.0];
        let mut two = row.clone();
        two.extend(vec![0.2; 5]);
        assert_eq!(mle_value(row, 5, &[3], 0.1), mle_value(two, 5, &[3, PAD], 0.1));
    }

    #[test]
    fn disagreement_examples() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(&Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap());
        let d = disagreement_loss(&mut g, a, &[vec![0, 1]], b, &[vec![0]]).unwrap();
        assert_eq!(g.scalar(d), 0.0);
        let c = g.constant(&Tensor::from_rows(&[vec![2.0, 3.3]]).unwrap());
        let d = disagreement_loss(&mut g, a, &[vec![0, 1]], c, &[vec![0]]).unwrap();
        assert!((g.scalar(d) - 0.09).abs() < 1e-12);
    }

    #[test]
    fn disagreement_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random(&mut rng, 5, 8);
        let b = random(&mut rng, 3, 8);
        let errs = finite_diff_check_all(
            |g, v| disagreement_loss(g, v[0], &[(0..5).collect()], v[1], &[(0..3).collect()]),
            &[a.clone(), b.clone()],
            1e-5,
            None,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e <= 1e-6), "{errs:?}");
        // Closed form: 2 (mean_a - mean_b) / len_a on every row of a.
        let mut g = Graph::new();
        let va = g.param(&a);
        let vb = g.param(&b);
        let d = disagreement_loss(&mut g, va, &[(0..5).collect()], vb, &[(0..3).collect()]).unwrap();
        g.backward(d).unwrap();
        let ma: Vec<f64> = (0..8).map(|j| (0..5).map(|i| a.at(i, j)).sum::<f64>() / 5.0).collect();
        let mb: Vec<f64> = (0..8).map(|j| (0..3).map(|i| b.at(i, j)).sum::<f64>() / 3.0).collect();
        let ga = g.grad(va).unwrap();
        let gb = g.grad(vb).unwrap();
        for j in 0..8 {
            assert!((ga[j] - 2.0 * (ma[j] - mb[j]) / 5.0).abs() < 1e-12);
            assert!((gb[j] + 2.0 * (ma[j] - mb[j]) / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ot_loss_identical_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 4, 6);
        let mut g = Graph::new();
        let a = g.constant(&x);
        let b = g.constant(&x);
        let l = ot_loss(&mut g, a, b, IpotParams::default()).unwrap();
        assert!(g.scalar(l) <= 1e-6);
    }

    #[test]
    fn frozen_plan_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 3, 5);
        let y = random(&mut rng, 4, 5);
        let plan = {
            let c = crate::ot::cosine_cost(&x, &y).unwrap();
            ipot(&c, &uniform(3), &uniform(4), IpotParams::default()).unwrap().plan
        };
        let errs = finite_diff_check_all(|g, v| ot_loss_with_plan(g, v[0], v[1], &plan), &[x, y], 1e-5, None).unwrap();
        assert!(errs.iter().all(|&e| e <= 1e-4), "{errs:?}");
    }

    #[test]
    fn total_combines_parts() {
        let mut g = Graph::new();
        let m = g.constant(&Tensor::scalar(2.0));
        let d = g.constant(&Tensor::scalar(0.5));
        let o = g.constant(&Tensor::scalar(0.3));
        let w = LossWeights::default();
        let t = total_loss(&mut g, m, Some(d), Some(o), &w).unwrap();
        assert!((g.scalar(t) - 2.08).abs() < 1e-12);
        let zero = LossWeights {
            lambda: 0.0,
            gamma: 0.0,
            ..w
        };
        let t = total_loss(&mut g, m, Some(d), Some(o), &zero).unwrap();
        assert_eq!(g.scalar(t), 2.0);
    }
}
