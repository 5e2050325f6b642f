//! Pre-LN encoder-decoder built on the autodiff graph.
//!
//! Sequences in a batch are packed row-wise without padding; attention
//! segments carry the row lists that keep sequences apart.

use std::rc::Rc;

use super::params::{AttnIdx, EmbedIdx, FfIdx, LnIdx, TransformerParams};
use crate::autodiff::{AttnSegment, AttnSpec, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Fixed sinusoidal encoding of one position.
pub fn positional(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Encoder output for a packed batch of sources.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `Ns x D`, all sources stacked.
    pub memory: Var,
    /// Memory rows of each source.
    pub rows: Vec<Vec<usize>>,
    /// Source ids aligned with memory rows.
    pub source_ids: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// Final-normed decoder states, `Nt x D`.
    pub hidden: Var,
    /// Head-averaged final cross-attention, `Nt x Ns`, when requested.
    pub p_att: Option<Var>,
    pub rows: Vec<Vec<usize>>,
}

/// Parameters bound into one graph.
///
/// Leaves are pushed consecutively, so parameter `i` is `Var(base + i)`.
pub struct Net<'p> {
    pub params: &'p TransformerParams,
    base: usize,
    embedding: Var,
}

impl<'p> Net<'p> {
    /// Binds every parameter; with `trainable` they collect gradients.
    pub fn bind(params: &'p TransformerParams, g: &mut Graph, trainable: bool) -> Result<Self> {
        let base = g.len();
        for t in params.tensors() {
            if trainable {
                g.param(t);
            } else {
                g.constant(t);
            }
        }
        let mut net = Self {
            params,
            base,
            embedding: Var(base),
        };
        net.embedding = match params.layout.embed {
            EmbedIdx::Factorized { e1, e2 } => g.matmul(net.p(e1), net.p(e2))?,
            EmbedIdx::Full { e } => net.p(e),
        };
        Ok(net)
    }

    pub(crate) fn p(&self, idx: usize) -> Var {
        Var(self.base + idx)
    }

    /// Graph handle of parameter `i` in layout order.
    pub fn param_var(&self, i: usize) -> Var {
        self.p(i)
    }

    /// Composed `V x D` embedding matrix.
    pub fn embedding(&self) -> Var {
        self.embedding
    }

    fn dim(&self) -> usize {
        self.params.config.embed_dim
    }

    /// Parameter gradients after `g.backward`, zeros where nothing flowed.
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| g.grad(self.p(i)).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let v = self.params.config.vocab_size;
        match ids.iter().find(|&&i| i >= v) {
            Some(bad) => Err(Error::Invalid(format!("token id {bad} outside vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    fn position_rows(&self, g: &mut Graph, positions: &[usize]) -> Result<Var> {
        let d = self.dim();
        let data = positions.iter().flat_map(|&p| positional(p, d)).collect();
        Ok(g.constant(&Tensor::matrix(positions.len(), d, data)?))
    }

    /// Scales token vectors by `sqrt(D)`, adds positions and applies dropout.
    fn input_rows(&self, g: &mut Graph, x: Var, positions: &[usize]) -> Result<Var> {
        let scaled = g.scale(x, (self.dim() as f64).sqrt())?;
        let pos = self.position_rows(g, positions)?;
        let x = g.add(scaled, pos)?;
        g.dropout(x, self.params.config.dropout)
    }

    /// Raw composed embedding rows.
    pub fn lookup(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        g.gather_rows(self.embedding, ids)
    }

    pub fn embed_tokens(&self, g: &mut Graph, ids: &[usize], positions: &[usize]) -> Result<Var> {
        let x = self.lookup(g, ids)?;
        self.input_rows(g, x, positions)
    }

    /// Decoder input rows from soft token vectors (`n x D`).
    pub fn embed_soft(&self, g: &mut Graph, soft: Var, positions: &[usize]) -> Result<Var> {
        self.input_rows(g, soft, positions)
    }

    fn linear(&self, g: &mut Graph, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = g.matmul(x, self.p(w))?;
        g.add_row(y, self.p(b))
    }

    fn norm(&self, g: &mut Graph, x: Var, ln: LnIdx) -> Result<Var> {
        g.layer_norm(x, self.p(ln.gamma), self.p(ln.beta))
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ff: FfIdx) -> Result<Var> {
        let h = self.linear(g, x, ff.w1, ff.b1)?;
        let h = g.gelu(h)?;
        self.linear(g, h, ff.w2, ff.b2)
    }

    pub(crate) fn kv(&self, g: &mut Graph, x: Var, a: AttnIdx) -> Result<(Var, Var)> {
        Ok((g.matmul(x, self.p(a.wk))?, self.linear(g, x, a.wv, a.bv)?))
    }

    fn attend(&self, g: &mut Graph, xq: Var, (k, v): (Var, Var), a: AttnIdx, spec: Rc<AttnSpec>) -> Result<Var> {
        let q = self.linear(g, xq, a.wq, a.bq)?;
        let o = g.attention(q, k, v, spec)?;
        self.linear(g, o, a.wo, a.bo)
    }

    fn residual(&self, g: &mut Graph, x: Var, delta: Var) -> Result<Var> {
        let delta = g.dropout(delta, self.params.config.dropout)?;
        g.add(x, delta)
    }

    fn spec(&self, segments: Vec<AttnSegment>) -> Rc<AttnSpec> {
        Rc::new(AttnSpec {
            heads: self.params.config.heads,
            segments,
        })
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Invalid(format!("empty {what}")));
        }
        if len > self.params.config.max_len {
            return Err(Error::Invalid(format!(
                "{what} of length {len} exceeds max_len {}",
                self.params.config.max_len
            )));
        }
        Ok(())
    }

    /// Runs the encoder over several sources packed into one matrix.
    pub fn encode(&self, g: &mut Graph, sources: &[Vec<usize>]) -> Result<Encoded> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut rows = Vec::with_capacity(sources.len());
        for s in sources {
            self.check_len("source", s.len())?;
            rows.push((ids.len()..ids.len() + s.len()).collect::<Vec<_>>());
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        let x = self.embed_tokens(g, &ids, &positions)?;
        let memory = self.encode_rows(g, x, &rows)?;
        Ok(Encoded {
            memory,
            rows,
            source_ids: ids,
        })
    }

    /// Encoder stack over prepared input rows.
    pub fn encode_rows(&self, g: &mut Graph, mut x: Var, rows: &[Vec<usize>]) -> Result<Var> {
        let spec = self.spec(
            rows.iter()
                .map(|r| AttnSegment {
                    q_rows: r.clone(),
                    k_rows: r.clone(),
                    causal: false,
                })
                .collect(),
        );
        let layout = &self.params.layout;
        for b in &layout.enc {
            let h = self.norm(g, x, b.ln1)?;
            let kv = self.kv(g, h, b.attn)?;
            let a = self.attend(g, h, kv, b.attn, spec.clone())?;
            x = self.residual(g, x, a)?;
            let h = self.norm(g, x, b.ln2)?;
            let f = self.feed_forward(g, h, b.ff)?;
            x = self.residual(g, x, f)?;
        }
        self.norm(g, x, layout.enc_ln)
    }

    /// Teacher-forced decoder pass. `targets[i]` reads source `i`. The
    /// copy attention is returned when `attention` is set.
    pub fn decode_teacher(&self, g: &mut Graph, enc: &Encoded, targets: &[Vec<usize>], attention: bool) -> Result<Decoded> {
        if targets.len() != enc.rows.len() {
            return Err(Error::Invalid(format!(
                "{} targets for {} sources",
                targets.len(),
                enc.rows.len()
            )));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut rows = Vec::with_capacity(targets.len());
        for t in targets {
            self.check_len("decoder input", t.len())?;
            rows.push((ids.len()..ids.len() + t.len()).collect::<Vec<_>>());
            ids.extend_from_slice(t);
            positions.extend(0..t.len());
        }
        let self_spec = self.spec(
            rows.iter()
                .map(|r| AttnSegment {
                    q_rows: r.clone(),
                    k_rows: r.clone(),
                    causal: true,
                })
                .collect(),
        );
        let cross_spec = self.spec(
            rows.iter()
                .zip(&enc.rows)
                .map(|(q, k)| AttnSegment {
                    q_rows: q.clone(),
                    k_rows: k.clone(),
                    causal: false,
                })
                .collect(),
        );
        let mut x = self.embed_tokens(g, &ids, &positions)?;
        let layout = &self.params.layout;
        let mut p_att = None;
        for (i, b) in layout.dec.iter().enumerate() {
            let h = self.norm(g, x, b.ln1)?;
            let kv = self.kv(g, h, b.self_attn)?;
            let a = self.attend(g, h, kv, b.self_attn, self_spec.clone())?;
            x = self.residual(g, x, a)?;
            let h = self.norm(g, x, b.ln2)?;
            let kv = self.kv(g, enc.memory, b.cross)?;
            if i + 1 == layout.dec.len() && attention {
                let q = self.linear(g, h, b.cross.wq, b.cross.bq)?;
                p_att = Some(g.attn_mean_probs(q, kv.0, cross_spec.clone())?);
            }
            let a = self.attend(g, h, kv, b.cross, cross_spec.clone())?;
            x = self.residual(g, x, a)?;
            let h = self.norm(g, x, b.ln3)?;
            let f = self.feed_forward(g, h, b.ff)?;
            x = self.residual(g, x, f)?;
        }
        let hidden = self.norm(g, x, layout.dec_ln)?;
        Ok(Decoded { hidden, p_att, rows })
    }

    /// Vocabulary logits `S = h E^T + b`.
    pub fn logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let s = g.matmul_nt(hidden, self.embedding)?;
        g.add_row(s, self.p(self.params.layout.out_bias))
    }

    /// Copy-gated mixture of `p_vocab` and the attention mass scattered onto
    /// the source token ids.
    pub fn copy_mix(&self, g: &mut Graph, hidden: Var, p_vocab: Var, p_att: Var, source_ids: &[usize]) -> Result<Var> {
        let (w, b) = self
            .params
            .layout
            .copy
            .ok_or_else(|| Error::Config("copy mechanism is disabled".into()))?;
        let gate = self.linear(g, hidden, w, b)?;
        let gate = g.sigmoid(gate)?;
        let copied = g.scatter_cols(p_att, source_ids, self.params.config.vocab_size)?;
        let keep = g.mul_col(p_vocab, gate)?;
        let rest = g.affine(gate, -1.0, 1.0)?;
        let copied = g.mul_col(copied, rest)?;
        g.add(keep, copied)
    }

    /// Final output distribution for decoder states.
    pub fn output(&self, g: &mut Graph, hidden: Var, p_att: Option<Var>, source_ids: &[usize]) -> Result<Var> {
        let s = self.logits(g, hidden)?;
        let p = g.softmax(s)?;
        match p_att {
            Some(att) => self.copy_mix(g, hidden, p, att, source_ids),
            None => Ok(p),
        }
    }
}

/// Per-hypothesis decoder cache for step-by-step decoding inside a graph.
///
/// Self-attention keys and values of all past steps live in one growing
/// matrix per block; each hypothesis keeps the list of its own rows, so
/// beam reordering only rearranges row lists.
pub struct StepDecoder {
    memory_rows: Vec<Vec<usize>>,
    source_ids: Vec<usize>,
    cross: Vec<(Var, Var)>,
    cache: Vec<Option<(Var, Var)>>,
    cached_rows: usize,
    hyps: Vec<Hyp>,
}

#[derive(Clone, Debug)]
struct Hyp {
    source: usize,
    rows: Vec<usize>,
}

pub struct Step {
    pub hidden: Var,
    pub p_att: Option<Var>,
}

impl StepDecoder {
    /// One hypothesis per entry of `sources` (indices into `enc.rows`).
    pub fn new(net: &Net, g: &mut Graph, enc: &Encoded, sources: &[usize]) -> Result<Self> {
        let cross = net
            .params
            .layout
            .dec
            .iter()
            .map(|b| net.kv(g, enc.memory, b.cross))
            .collect::<Result<_>>()?;
        Ok(Self {
            memory_rows: enc.rows.clone(),
            source_ids: enc.source_ids.clone(),
            cross,
            cache: vec![None; net.params.layout.dec.len()],
            cached_rows: 0,
            hyps: sources.iter().map(|&source| Hyp { source, rows: Vec::new() }).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }

    /// Tokens decoded so far by each hypothesis (all equal).
    pub fn position(&self) -> usize {
        self.hyps.first().map_or(0, |h| h.rows.len())
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    /// Keeps hypothesis `parents[i]` as the new hypothesis `i`.
    pub fn reorder(&mut self, parents: &[usize]) {
        self.hyps = parents.iter().map(|&p| self.hyps[p].clone()).collect();
    }

    /// Feeds one input row per hypothesis (`n x D`, already embedded).
    pub fn step(&mut self, net: &Net, g: &mut Graph, x: Var) -> Result<Step> {
        let n = self.hyps.len();
        if g.dims(x).0 != n {
            return Err(Error::shape("decoder step", format!("{} rows for {n} hypotheses", g.dims(x).0)));
        }
        if self.position() >= net.params.config.max_len {
            return Err(Error::Invalid(format!(
                "decoder input exceeds max_len {}",
                net.params.config.max_len
            )));
        }
        let base = self.cached_rows;
        for (i, h) in self.hyps.iter_mut().enumerate() {
            h.rows.push(base + i);
        }
        self.cached_rows += n;
        let self_spec = net.spec(
            self.hyps
                .iter()
                .enumerate()
                .map(|(i, h)| AttnSegment {
                    q_rows: vec![i],
                    k_rows: h.rows.clone(),
                    causal: false,
                })
                .collect(),
        );
        let cross_spec = net.spec(
            self.hyps
                .iter()
                .enumerate()
                .map(|(i, h)| AttnSegment {
                    q_rows: vec![i],
                    k_rows: self.memory_rows[h.source].clone(),
                    causal: false,
                })
                .collect(),
        );
        let layout = &net.params.layout;
        let mut x = x;
        let mut p_att = None;
        for (bi, b) in layout.dec.iter().enumerate() {
            let h = net.norm(g, x, b.ln1)?;
            let (k, v) = net.kv(g, h, b.self_attn)?;
            let (k, v) = match self.cache[bi] {
                Some((ck, cv)) => (g.concat_rows(&[ck, k])?, g.concat_rows(&[cv, v])?),
                None => (k, v),
            };
            self.cache[bi] = Some((k, v));
            let a = net.attend(g, h, (k, v), b.self_attn, self_spec.clone())?;
            x = net.residual(g, x, a)?;
            let h = net.norm(g, x, b.ln2)?;
            if bi + 1 == layout.dec.len() && layout.copy.is_some() {
                let q = net.linear(g, h, b.cross.wq, b.cross.bq)?;
                p_att = Some(g.attn_mean_probs(q, self.cross[bi].0, cross_spec.clone())?);
            }
            let a = net.attend(g, h, self.cross[bi], b.cross, cross_spec.clone())?;
            x = net.residual(g, x, a)?;
            let h = net.norm(g, x, b.ln3)?;
            let f = net.feed_forward(g, h, b.ff)?;
            x = net.residual(g, x, f)?;
        }
        let hidden = net.norm(g, x, layout.dec_ln)?;
        Ok(Step { hidden, p_att })
    }

    /// Feeds hard tokens, one per hypothesis.
    pub fn step_tokens(&mut self, net: &Net, g: &mut Graph, ids: &[usize]) -> Result<Step> {
        let positions = vec![self.position(); ids.len()];
        let x = net.embed_tokens(g, ids, &positions)?;
        self.step(net, g, x)
    }
}
