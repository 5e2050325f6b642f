//! Fused multi-head attention over packed, segment-indexed rows.

use super::graph::softmax_in_place;
use super::linalg::gemm;
use crate::error::{Error, Result};

/// One attention block: the query rows of a sequence and the key rows it
/// may read. Keys are listed in sequence order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_rows: Vec<usize>,
    pub k_rows: Vec<usize>,
    /// Query `i` sees keys `0..=i + (k_len - q_len)`.
    pub causal: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub heads: usize,
    pub segments: Vec<AttnSegment>,
}

impl AttnSpec {
    pub(crate) fn validate(&self, nq: usize, nk: usize, d: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::shape("attention", format!("{} heads for width {d}", self.heads)));
        }
        for s in &self.segments {
            if s.k_rows.is_empty() || s.q_rows.iter().any(|&r| r >= nq) || s.k_rows.iter().any(|&r| r >= nk) {
                return Err(Error::shape("attention", "segment rows out of range"));
            }
            if s.causal && s.q_rows.len() > s.k_rows.len() {
                return Err(Error::shape("attention", "causal segment with more queries than keys"));
            }
        }
        Ok(())
    }

    /// Offsets of each (segment, head) probability block inside the saved buffer.
    fn block_sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments
            .iter()
            .map(|s| s.q_rows.len() * s.k_rows.len())
    }
}

fn gather(src: &[f64], rows: &[usize], d: usize, col0: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * dh);
    for &r in rows {
        out.extend_from_slice(&src[r * d + col0..r * d + col0 + dh]);
    }
    out
}

fn scatter_add(dst: &mut [f64], rows: &[usize], d: usize, col0: usize, dh: usize, block: &[f64]) {
    for (p, &r) in rows.iter().enumerate() {
        for j in 0..dh {
            dst[r * d + col0 + j] += block[p * dh + j];
        }
    }
}

/// Softmax-normalised attention weights for one (segment, head).
fn head_probs(seg: &AttnSegment, qh: &[f64], kh: &[f64], dh: usize) -> Vec<f64> {
    let lq = seg.q_rows.len();
    let lk = seg.k_rows.len();
    let mut s = vec![0.0; lq * lk];
    gemm(lq, dh, lk, qh, false, kh, true, &mut s, false);
    let scale = 1.0 / (dh as f64).sqrt();
    let shift = lk - lq.min(lk);
    for i in 0..lq {
        let row = &mut s[i * lk..(i + 1) * lk];
        row.iter_mut().for_each(|v| *v *= scale);
        if seg.causal {
            for v in row.iter_mut().skip(i + shift + 1) {
                *v = f64::NEG_INFINITY;
            }
        }
        softmax_in_place(row);
    }
    s
}

/// All probability blocks, ordered by segment then head.
pub(crate) fn probabilities(spec: &AttnSpec, q: &[f64], k: &[f64], d: usize) -> Vec<f64> {
    let dh = d / spec.heads;
    let mut probs = Vec::with_capacity(spec.block_sizes().sum::<usize>() * spec.heads);
    for seg in &spec.segments {
        for h in 0..spec.heads {
            let qh = gather(q, &seg.q_rows, d, h * dh, dh);
            let kh = gather(k, &seg.k_rows, d, h * dh, dh);
            probs.extend(head_probs(seg, &qh, &kh, dh));
        }
    }
    probs
}

pub(crate) fn forward(spec: &AttnSpec, q: &[f64], k: &[f64], v: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let nq = q.len() / d;
    let dh = d / spec.heads;
    let probs = probabilities(spec, q, k, d);
    let mut out = vec![0.0; nq * d];
    let mut offset = 0;
    for seg in &spec.segments {
        let lq = seg.q_rows.len();
        let lk = seg.k_rows.len();
        for h in 0..spec.heads {
            let p = &probs[offset..offset + lq * lk];
            offset += lq * lk;
            let vh = gather(v, &seg.k_rows, d, h * dh, dh);
            let mut oh = vec![0.0; lq * dh];
            gemm(lq, lk, dh, p, false, &vh, false, &mut oh, false);
            scatter_add(&mut out, &seg.q_rows, d, h * dh, dh, &oh);
        }
    }
    (out, probs)
}

pub(crate) fn mean_dense(spec: &AttnSpec, probs: &[f64], nq: usize, nk: usize) -> Vec<f64> {
    let mut out = vec![0.0; nq * nk];
    let inv = 1.0 / spec.heads as f64;
    let mut offset = 0;
    for seg in &spec.segments {
        let lk = seg.k_rows.len();
        for _ in 0..spec.heads {
            for (i, &qr) in seg.q_rows.iter().enumerate() {
                for (j, &kr) in seg.k_rows.iter().enumerate() {
                    out[qr * nk + kr] += inv * probs[offset + i * lk + j];
                }
            }
            offset += seg.q_rows.len() * lk;
        }
    }
    out
}

pub(crate) struct QkvGrads {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

/// Given dL/dP for one head block, accumulates dL/dQ and dL/dK.
#[allow(clippy::too_many_arguments)]
fn softmax_scores_backward(
    seg: &AttnSegment,
    p: &[f64],
    dp: &[f64],
    qh: &[f64],
    kh: &[f64],
    dh: usize,
    col0: usize,
    d: usize,
    dq: &mut [f64],
    dk: &mut [f64],
) {
    let lq = seg.q_rows.len();
    let lk = seg.k_rows.len();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ds = vec![0.0; lq * lk];
    for i in 0..lq {
        let pr = &p[i * lk..(i + 1) * lk];
        let dr = &dp[i * lk..(i + 1) * lk];
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for j in 0..lk {
            ds[i * lk + j] = pr[j] * (dr[j] - dot) * scale;
        }
    }
    let mut dqh = vec![0.0; lq * dh];
    gemm(lq, lk, dh, &ds, false, kh, false, &mut dqh, false);
    scatter_add(dq, &seg.q_rows, d, col0, dh, &dqh);
    let mut dkh = vec![0.0; lk * dh];
    gemm(lk, lq, dh, &ds, true, qh, false, &mut dkh, false);
    scatter_add(dk, &seg.k_rows, d, col0, dh, &dkh);
}

pub(crate) fn backward(
    spec: &AttnSpec,
    probs: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    d: usize,
) -> QkvGrads {
    let dh = d / spec.heads;
    let mut grads = QkvGrads {
        q: vec![0.0; q.len()],
        k: vec![0.0; k.len()],
        v: vec![0.0; v.len()],
    };
    let mut offset = 0;
    for seg in &spec.segments {
        let lq = seg.q_rows.len();
        let lk = seg.k_rows.len();
        for h in 0..spec.heads {
            let col0 = h * dh;
            let p = &probs[offset..offset + lq * lk];
            offset += lq * lk;
            let go = gather(g, &seg.q_rows, d, col0, dh);
            let vh = gather(v, &seg.k_rows, d, col0, dh);
            // dV = P^T dO
            let mut dvh = vec![0.0; lk * dh];
            gemm(lk, lq, dh, p, true, &go, false, &mut dvh, false);
            scatter_add(&mut grads.v, &seg.k_rows, d, col0, dh, &dvh);
            // dP = dO V^T
            let mut dp = vec![0.0; lq * lk];
            gemm(lq, dh, lk, &go, false, &vh, true, &mut dp, false);
            let qh = gather(q, &seg.q_rows, d, col0, dh);
            let kh = gather(k, &seg.k_rows, d, col0, dh);
            softmax_scores_backward(seg, p, &dp, &qh, &kh, dh, col0, d, &mut grads.q, &mut grads.k);
        }
    }
    grads
}

pub(crate) fn mean_probs_backward(
    spec: &AttnSpec,
    probs: &[f64],
    q: &[f64],
    k: &[f64],
    g: &[f64],
    d: usize,
    nk: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / spec.heads;
    let inv = 1.0 / spec.heads as f64;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut offset = 0;
    for seg in &spec.segments {
        let lq = seg.q_rows.len();
        let lk = seg.k_rows.len();
        let mut dp = vec![0.0; lq * lk];
        for (i, &qr) in seg.q_rows.iter().enumerate() {
            for (j, &kr) in seg.k_rows.iter().enumerate() {
                dp[i * lk + j] = g[qr * nk + kr] * inv;
            }
        }
        for h in 0..spec.heads {
            let col0 = h * dh;
            let p = &probs[offset..offset + lq * lk];
            offset += lq * lk;
            let qh = gather(q, &seg.q_rows, d, col0, dh);
            let kh = gather(k, &seg.k_rows, d, col0, dh);
            softmax_scores_backward(seg, p, &dp, &qh, &kh, dh, col0, d, &mut dq, &mut dk);
        }
    }
    (dq, dk)
}
