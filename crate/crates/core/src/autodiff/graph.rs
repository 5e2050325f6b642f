use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{self, AttnSpec};
use super::linalg::gemm;
use super::tensor::{dims_of, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Affine { a: Var, scale: f64 },
    MulConst { a: Var, c: Rc<[f64]> },
    SoftmaxRows(Var),
    LogFloor { a: Var, floor: f64 },
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    MeanAxis { a: Var, axis: usize },
    SumSq(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    GatherRows { table: Var, idx: Rc<[usize]> },
    ScatterCols { a: Var, map: Rc<[usize]> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    NormalizeRows { a: Var, norms: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: Rc<AttnSpec>,
        probs: Vec<f64>,
    },
    AttnMeanProbs {
        q: Var,
        k: Var,
        spec: Rc<AttnSpec>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulCol { .. } => "mul_col",
            Op::Affine { .. } => "affine",
            Op::MulConst { .. } => "mul_const",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogFloor { .. } => "log",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sum(_) => "sum",
            Op::MeanAxis { .. } => "mean_axis",
            Op::SumSq(_) => "sum_sq",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterCols { .. } => "scatter_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Attention { .. } => "attention",
            Op::AttnMeanProbs { .. } => "attn_mean_probs",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended as operations execute; [`Graph::backward`] walks them
/// once in reverse append order. A graph supports a single backward pass,
/// after which interior buffers are released.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            dropout_rng: None,
        }
    }

    /// Graph in training mode: `dropout` draws masks from a seeded stream.
    pub fn training(seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf; gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        dims_of(&self.nodes[v.0].shape)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed by backward".into()));
        }
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} (element {bad} = {})",
                op.name(),
                value[bad]
            )));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(shape, value, op, &[a])
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("{m}x{k} times {}{br}x{bc}", if trans_b { "T " } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            false,
            &self.nodes[b.0].value,
            trans_b,
            &mut out,
            false,
        );
        self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.tensor(a).transposed();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Transpose(a), &[a])
    }

    // ----------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_with(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_with(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_with(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.nodes[row.0].value.len() != c {
            return Err(Error::shape("add_row", format!("row of {} for {r}x{c}", self.nodes[row.0].value.len())));
        }
        let rv = &self.nodes[row.0].value;
        let mut value = self.nodes[a.0].value.clone();
        for chunk in value.chunks_mut(c) {
            chunk.iter_mut().zip(rv).for_each(|(x, b)| *x += b);
        }
        self.push(vec![r, c], value, Op::AddRow { a, row }, &[a, row])
    }

    /// Scales row `i` of an `r x c` matrix by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.nodes[col.0].value.len() != r {
            return Err(Error::shape("mul_col", format!("column of {} for {r}x{c}", self.nodes[col.0].value.len())));
        }
        let cv = &self.nodes[col.0].value;
        let mut value = self.nodes[a.0].value.clone();
        for (chunk, s) in value.chunks_mut(c).zip(cv) {
            chunk.iter_mut().for_each(|x| *x *= s);
        }
        self.push(vec![r, c], value, Op::MulCol { a, col }, &[a, col])
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.map_unary(a, Op::Affine { a, scale }, |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    /// Elementwise product with a constant buffer of the same length.
    pub fn mul_const(&mut self, a: Var, c: impl Into<Rc<[f64]>>) -> Result<Var> {
        let c: Rc<[f64]> = c.into();
        if c.len() != self.nodes[a.0].value.len() {
            return Err(Error::shape("mul_const", format!("{} constants for {:?}", c.len(), self.nodes[a.0].shape)));
        }
        let value = zip_with(&self.nodes[a.0].value, &c, |x, y| x * y);
        self.push(self.nodes[a.0].shape.clone(), value, Op::MulConst { a, c }, &[a])
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        let keep = 1.0 - p;
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(a, mask)
    }

    // ------------------------------------------------------------ nonlinear

    /// Numerically stabilised softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut value = self.nodes[a.0].value.clone();
        for chunk in value.chunks_mut(c) {
            softmax_in_place(chunk);
        }
        let shape = self.nodes[a.0].shape.clone();
        debug_assert_eq!(r * c, value.len());
        self.push(shape, value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.log_floor(a, 0.0)
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.map_unary(a, Op::LogFloor { a, floor }, |x| x.max(floor).ln())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Exp(a), f64::exp)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Gelu(a), gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Sigmoid(a), sigmoid)
    }

    // ----------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Mean of a matrix along `axis` (0: over rows, giving `1 x c`; 1: over
    /// columns, giving `r x 1`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = &self.nodes[a.0].value;
        let (shape, value) = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for row in x.chunks(c) {
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                (vec![1, c], out)
            }
            1 => (
                vec![r, 1],
                x.chunks(c).map(|row| row.iter().sum::<f64>() / c as f64).collect(),
            ),
            _ => return Err(Error::shape("mean_axis", format!("axis {axis} on a matrix"))),
        };
        self.push(shape, value, Op::MeanAxis { a, axis }, &[a])
    }

    /// Squared L2 norm of all entries.
    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.iter().map(|v| v * v).sum();
        self.push(vec![1], vec![s], Op::SumSq(a), &[a])
    }

    // -------------------------------------------------------- restructuring

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape("concat_rows", format!("width {pc} vs {c}")));
            }
            rows += r;
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(vec![rows, c], value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let r = self.dims(first).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[p.0].value[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![r, total], value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let r = self.dims(a).0;
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        self.gather_rows(a, &(start..end).collect::<Vec<_>>())
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} cols")));
        }
        let x = &self.nodes[a.0].value;
        let value = x.chunks(c).flat_map(|row| row[start..end].iter().copied()).collect();
        self.push(vec![r, end - start], value, Op::SliceCols { a, start }, &[a])
    }

    /// Row lookup (embedding lookup when `table` is an embedding matrix).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let x = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            value.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let idx: Rc<[usize]> = idx.into();
        self.push(vec![idx.len(), c], value, Op::GatherRows { table, idx }, &[table])
    }

    /// Sums column `j` of `a` into column `map[j]` of an `r x width` output.
    pub fn scatter_cols(&mut self, a: Var, map: &[usize], width: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if map.len() != c || map.iter().any(|&m| m >= width) {
            return Err(Error::shape("scatter_cols", format!("map of {} into width {width} for {c} cols", map.len())));
        }
        let x = &self.nodes[a.0].value;
        let mut value = vec![0.0; r * width];
        for i in 0..r {
            for (j, &m) in map.iter().enumerate() {
                value[i * width + m] += x[i * c + j];
            }
        }
        let map: Rc<[usize]> = map.into();
        self.push(vec![r, width], value, Op::ScatterCols { a, map }, &[a])
    }

    // ------------------------------------------------------------- composite

    /// Row-wise layer normalisation with learned `gamma` and `beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.nodes[gamma.0].value.len() != c || self.nodes[beta.0].value.len() != c {
            return Err(Error::shape("layer_norm", "gain/bias width"));
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        self.push(
            vec![r, c],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Scales every row to unit L2 norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = &self.nodes[a.0].value;
        let mut norms = Vec::with_capacity(r);
        let mut value = Vec::with_capacity(r * c);
        for (i, row) in x.chunks(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Invalid(format!("zero-norm row {i} cannot be normalised")));
            }
            norms.push(n);
            value.extend(row.iter().map(|v| v / n));
        }
        self.push(vec![r, c], value, Op::NormalizeRows { a, norms }, &[a])
    }

    /// Multi-head scaled dot-product attention over packed rows.
    ///
    /// `q` is `Nq x D`; `k`, `v` are `Nk x D`. Each segment of `spec` maps a
    /// set of query rows onto the key rows it may attend to. Rows outside all
    /// segments produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: Rc<AttnSpec>) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if dk != d || self.dims(v) != (nk, d) {
            return Err(Error::shape("attention", format!("q {nq}x{d}, k {nk}x{dk}, v {:?}", self.dims(v))));
        }
        spec.validate(nq, nk, d)?;
        let (out, probs) = attention::forward(
            &spec,
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
            d,
        );
        self.push(vec![nq, d], out, Op::Attention { q, k, v, spec, probs }, &[q, k, v])
    }

    /// Head-averaged attention probabilities as a dense `Nq x Nk` matrix.
    pub fn attn_mean_probs(&mut self, q: Var, k: Var, spec: Rc<AttnSpec>) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if dk != d {
            return Err(Error::shape("attn_mean_probs", format!("q width {d}, k width {dk}")));
        }
        spec.validate(nq, nk, d)?;
        let probs = attention::probabilities(&spec, &self.nodes[q.0].value, &self.nodes[k.0].value, d);
        let out = attention::mean_dense(&spec, &probs, nq, nk);
        self.push(vec![nq, nk], out, Op::AttnMeanProbs { q, k, spec, probs }, &[q, k])
    }

    // -------------------------------------------------------------- backward

    /// Accumulates d(loss)/d(leaf) into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed by backward".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Graph("backward on an empty graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);
        let Graph { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            if matches!(nodes[i].op, Op::Leaf) || !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, i, &g);
        }
        for (i, node) in nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) && i != loss.0 {
                node.value = Vec::new();
                node.op = Op::Leaf;
            }
        }
        Ok(())
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Adds a contribution into the gradient buffer of `v` when it tracks grads.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
    f(buf);
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let y = &node.value;
    let (r, c) = dims_of(&node.shape);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = dims_of(&nodes[a.0].shape);
            let n = c;
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            // dA = G * B'^T
            acc(nodes, grads, *a, |da| gemm(m, n, k, g, false, bv, !*trans_b, da, true));
            if *trans_b {
                // B is n x k: dB = G^T * A
                acc(nodes, grads, *b, |db| gemm(n, m, k, g, true, av, false, db, true));
            } else {
                // B is k x n: dB = A^T * G
                acc(nodes, grads, *b, |db| gemm(k, m, n, av, true, g, false, db, true));
            }
        }
        Op::Transpose(a) => acc(nodes, grads, *a, |da| {
            // y is r x c; a is c x r
            for p in 0..r {
                for q in 0..c {
                    da[q * r + p] += g[p * c + q];
                }
            }
        }),
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, gv)| *x -= gv));
        }
        Op::Mul(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            acc(nodes, grads, *a, |d| {
                d.iter_mut().zip(g.iter().zip(bv)).for_each(|(x, (gv, bb))| *x += gv * bb)
            });
            acc(nodes, grads, *b, |d| {
                d.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (gv, aa))| *x += gv * aa)
            });
        }
        Op::AddRow { a, row } => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *row, |d| {
                for chunk in g.chunks(c) {
                    add_into(d, chunk);
                }
            });
        }
        Op::MulCol { a, col } => {
            let av = &nodes[a.0].value;
            let cv = &nodes[col.0].value;
            acc(nodes, grads, *a, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[i * c + j] * cv[i];
                    }
                }
            });
            acc(nodes, grads, *col, |d| {
                for i in 0..r {
                    d[i] += (0..c).map(|j| g[i * c + j] * av[i * c + j]).sum::<f64>();
                }
            });
        }
        Op::Affine { a, scale } => acc(nodes, grads, *a, |d| {
            d.iter_mut().zip(g).for_each(|(x, gv)| *x += scale * gv)
        }),
        Op::MulConst { a, c: k } => acc(nodes, grads, *a, |d| {
            d.iter_mut().zip(g.iter().zip(k.iter())).for_each(|(x, (gv, kv))| *x += gv * kv)
        }),
        Op::SoftmaxRows(a) => acc(nodes, grads, *a, |d| {
            for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    drow[j] += yrow[j] * (grow[j] - dot);
                }
            }
        }),
        Op::LogFloor { a, floor } => {
            let av = &nodes[a.0].value;
            acc(nodes, grads, *a, |d| {
                for ((x, gv), &xv) in d.iter_mut().zip(g).zip(av) {
                    if xv > *floor {
                        *x += gv / xv;
                    }
                }
            })
        }
        Op::Exp(a) => acc(nodes, grads, *a, |d| {
            d.iter_mut().zip(g.iter().zip(y)).for_each(|(x, (gv, yv))| *x += gv * yv)
        }),
        Op::Relu(a) => {
            let av = &nodes[a.0].value;
            acc(nodes, grads, *a, |d| {
                for ((x, gv), &xv) in d.iter_mut().zip(g).zip(av) {
                    if xv > 0.0 {
                        *x += gv;
                    }
                }
            })
        }
        Op::Gelu(a) => {
            let av = &nodes[a.0].value;
            acc(nodes, grads, *a, |d| {
                for ((x, gv), &xv) in d.iter_mut().zip(g).zip(av) {
                    *x += gv * gelu_grad(xv);
                }
            })
        }
        Op::Sigmoid(a) => acc(nodes, grads, *a, |d| {
            d.iter_mut()
                .zip(g.iter().zip(y))
                .for_each(|(x, (gv, yv))| *x += gv * yv * (1.0 - yv))
        }),
        Op::Sum(a) => acc(nodes, grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
        Op::MeanAxis { a, axis } => {
            let (ar, ac) = dims_of(&nodes[a.0].shape);
            acc(nodes, grads, *a, |d| {
                for p in 0..ar {
                    for q in 0..ac {
                        d[p * ac + q] += if *axis == 0 {
                            g[q] / ar as f64
                        } else {
                            g[p] / ac as f64
                        };
                    }
                }
            })
        }
        Op::SumSq(a) => {
            let av = &nodes[a.0].value;
            acc(nodes, grads, *a, |d| {
                d.iter_mut().zip(av).for_each(|(x, v)| *x += 2.0 * v * g[0])
            })
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                acc(nodes, grads, *p, |d| add_into(d, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let mut col0 = 0;
            for p in parts {
                let w = dims_of(&nodes[p.0].shape).1;
                acc(nodes, grads, *p, |d| {
                    for i in 0..r {
                        add_into(&mut d[i * w..(i + 1) * w], &g[i * c + col0..i * c + col0 + w]);
                    }
                });
                col0 += w;
            }
        }
        Op::SliceCols { a, start } => {
            let ac = dims_of(&nodes[a.0].shape).1;
            acc(nodes, grads, *a, |d| {
                for i in 0..r {
                    add_into(&mut d[i * ac + start..i * ac + start + c], &g[i * c..(i + 1) * c]);
                }
            })
        }
        Op::GatherRows { table, idx } => acc(nodes, grads, *table, |d| {
            for (p, &row) in idx.iter().enumerate() {
                add_into(&mut d[row * c..(row + 1) * c], &g[p * c..(p + 1) * c]);
            }
        }),
        Op::ScatterCols { a, map } => {
            let ac = map.len();
            acc(nodes, grads, *a, |d| {
                for i in 0..r {
                    for (j, &m) in map.iter().enumerate() {
                        d[i * ac + j] += g[i * c + m];
                    }
                }
            })
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = &nodes[gamma.0].value;
            acc(nodes, grads, *gamma, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
            });
            acc(nodes, grads, *beta, |d| {
                for chunk in g.chunks(c) {
                    add_into(d, chunk);
                }
            });
            acc(nodes, grads, *x, |d| {
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        dxhat[j] = g[i * c + j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[i * c + j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        d[i * c + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                    }
                }
            });
        }
        Op::NormalizeRows { a, norms } => acc(nodes, grads, *a, |d| {
            for i in 0..r {
                let yr = &y[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    d[i * c + j] += (gr[j] - yr[j] * dot) / norms[i];
                }
            }
        }),
        Op::Attention { q, k, v, spec, probs } => {
            let d = dims_of(&nodes[q.0].shape).1;
            let grads_qkv = attention::backward(
                spec,
                probs,
                &nodes[q.0].value,
                &nodes[k.0].value,
                &nodes[v.0].value,
                g,
                d,
            );
            acc(nodes, grads, *q, |dq| add_into(dq, &grads_qkv.q));
            acc(nodes, grads, *k, |dk| add_into(dk, &grads_qkv.k));
            acc(nodes, grads, *v, |dv| add_into(dv, &grads_qkv.v));
        }
        Op::AttnMeanProbs { q, k, spec, probs } => {
            let d = dims_of(&nodes[q.0].shape).1;
            let nk = c;
            let (dq_full, dk_full) =
                attention::mean_probs_backward(spec, probs, &nodes[q.0].value, &nodes[k.0].value, g, d, nk);
            acc(nodes, grads, *q, |dq| add_into(dq, &dq_full));
            acc(nodes, grads, *k, |dk| add_into(dk, &dk_full));
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
}
