use std::cmp::Ordering;

use serde::Serialize;

use super::params::TransformerParams;
use super::transformer::{Encoded, Net, StepDecoder};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};

/// Tables decoded together by [`greedy`]; bounds the dense attention buffers.
const GREEDY_CHUNK: usize = 32;

/// Floor inside `log P_final` wherever a log-probability feeds a graph.
pub const LOG_FLOOR: f64 = 1e-12;

/// Lowest id among the maxima of a row.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Composed embedding rows for `ids`.
pub fn compose_embedding(params: &TransformerParams, ids: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let net = Net::bind(params, &mut g, false)?;
    let x = net.lookup(&mut g, ids)?;
    Ok(g.tensor(x))
}

/// Encoder memory (`len x D`) in eval mode.
pub fn encode(params: &TransformerParams, source: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let net = Net::bind(params, &mut g, false)?;
    let enc = net.encode(&mut g, &[source.to_vec()])?;
    Ok(g.tensor(enc.memory))
}

/// Decoder outputs for the last position of a prefix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecoderStepState {
    pub hidden: Vec<f64>,
    /// Head-averaged final cross-attention over source positions.
    pub p_att: Vec<f64>,
    pub logits: Vec<f64>,
    pub p_vocab: Vec<f64>,
    /// Copy gate `p_g`; `None` when the copy mechanism is off.
    pub p_gen: Option<f64>,
}

pub fn decode_step(params: &TransformerParams, memory: &Tensor, prefix: &[usize]) -> Result<DecoderStepState> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::Invalid("decoder prefix must start with <bos>".into()));
    }
    let (ns, d) = memory.dims();
    if d != params.config.embed_dim || ns == 0 {
        return Err(Error::shape("decode_step", format!("memory {ns}x{d}")));
    }
    let mut g = Graph::new();
    let net = Net::bind(params, &mut g, false)?;
    let enc = Encoded {
        memory: g.constant(memory),
        rows: vec![(0..ns).collect()],
        source_ids: Vec::new(),
    };
    let dec = net.decode_teacher(&mut g, &enc, &[prefix.to_vec()], true)?;
    let last = prefix.len() - 1;
    let h = g.slice_rows(dec.hidden, last, last + 1)?;
    let s = net.logits(&mut g, h)?;
    let p = g.softmax(s)?;
    let (p_att, p_gen) = match (dec.p_att, params.layout.copy) {
        (Some(att), Some((w, b))) => {
            let a = g.slice_rows(att, last, last + 1)?;
            let z = g.matmul(h, net.param_var(w))?;
            let z = g.add_row(z, net.param_var(b))?;
            let z = g.sigmoid(z)?;
            (g.value(a).to_vec(), Some(g.scalar(z)))
        }
        (Some(att), None) => {
            let a = g.slice_rows(att, last, last + 1)?;
            (g.value(a).to_vec(), None)
        }
        (None, _) => unreachable!("attention requested"),
    };
    Ok(DecoderStepState {
        hidden: g.value(h).to_vec(),
        p_att,
        logits: g.value(s).to_vec(),
        p_vocab: g.value(p).to_vec(),
        p_gen,
    })
}

/// `P_final = p_g P_vocab + (1 - p_g) P_att` with attention mass summed per
/// source token id. Returns `P_vocab` unchanged when the gate is absent.
pub fn copy_mix(state: &DecoderStepState, source_ids: &[usize], vocab_size: usize) -> Result<Vec<f64>> {
    if state.p_vocab.len() != vocab_size {
        return Err(Error::shape("copy_mix", format!("{} probabilities for V={vocab_size}", state.p_vocab.len())));
    }
    let Some(p_g) = state.p_gen else {
        return Ok(state.p_vocab.clone());
    };
    if source_ids.len() != state.p_att.len() {
        return Err(Error::shape(
            "copy_mix",
            format!("{} source ids for {} attention weights", source_ids.len(), state.p_att.len()),
        ));
    }
    let mut out: Vec<f64> = state.p_vocab.iter().map(|p| p_g * p).collect();
    for (&id, &a) in source_ids.iter().zip(&state.p_att) {
        if id >= vocab_size {
            return Err(Error::Invalid(format!("source id {id} outside vocabulary of {vocab_size}")));
        }
        out[id] += (1.0 - p_g) * a;
    }
    Ok(out)
}

/// Output distribution rows for one decoder step.
fn step_probs(net: &Net, g: &mut Graph, dec: &mut StepDecoder, ids: &[usize]) -> Result<Var> {
    let step = dec.step_tokens(net, g, ids)?;
    let source_ids = dec.source_ids().to_vec();
    net.output(g, step.hidden, step.p_att, &source_ids)
}

fn step_cap(params: &TransformerParams, max_steps: usize) -> usize {
    max_steps.min(params.config.max_len).max(1)
}

/// Greedy decoding of many sources. Each output ends with `<eos>` unless it
/// ran into the step cap; ties pick the lowest token id.
pub fn greedy(params: &TransformerParams, sources: &[Vec<usize>], max_steps: usize) -> Result<Vec<Vec<usize>>> {
    let cap = step_cap(params, max_steps);
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(GREEDY_CHUNK) {
        let mut g = Graph::new();
        let net = Net::bind(params, &mut g, false)?;
        let enc = net.encode(&mut g, chunk)?;
        let mut dec = StepDecoder::new(&net, &mut g, &enc, &(0..chunk.len()).collect::<Vec<_>>())?;
        let mut seqs: Vec<Vec<usize>> = vec![Vec::new(); chunk.len()];
        // Chunk-local index of each live hypothesis.
        let mut live: Vec<usize> = (0..chunk.len()).collect();
        let mut last = vec![BOS; chunk.len()];
        for t in 0..cap {
            let p = step_probs(&net, &mut g, &mut dec, &last)?;
            let v = params.config.vocab_size;
            let probs = g.value(p);
            let mut keep = Vec::new();
            let mut next_live = Vec::new();
            let mut next_last = Vec::new();
            for (i, &who) in live.iter().enumerate() {
                let y = argmax(&probs[i * v..(i + 1) * v]);
                seqs[who].push(y);
                if y != EOS && t + 1 < cap {
                    keep.push(i);
                    next_live.push(who);
                    next_last.push(y);
                }
            }
            if next_live.is_empty() {
                break;
            }
            dec.reorder(&keep);
            live = next_live;
            last = next_last;
        }
        out.extend(seqs);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Generated tokens, `<eos>` included when produced.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub log_prob: f64,
}

impl Hypothesis {
    /// Length-normalised score used to rank finished hypotheses.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

/// Beam search. Finished hypotheses keep their slot, so the search ends once
/// `beam` of them exist or the step cap is reached. Candidates tie-break on
/// (parent, token id); beam 1 reproduces [`greedy`].
pub fn beam_search(params: &TransformerParams, source: &[usize], beam: usize, max_steps: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Invalid("beam must be at least 1".into()));
    }
    let cap = step_cap(params, max_steps);
    let v = params.config.vocab_size;
    let mut g = Graph::new();
    let net = Net::bind(params, &mut g, false)?;
    let enc = net.encode(&mut g, &[source.to_vec()])?;
    let mut dec = StepDecoder::new(&net, &mut g, &enc, &[0])?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 0..cap {
        let last: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let p = step_probs(&net, &mut g, &mut dec, &last)?;
        let probs = g.value(p);
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (i, h) in live.iter().enumerate() {
            for y in 0..v {
                cands.push((h.log_prob + probs[i * v + y].ln(), i, y));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut parents = Vec::new();
        let mut next = Vec::new();
        for &(lp, i, y) in cands.iter().take(beam - finished.len()) {
            let mut tokens = live[i].tokens.clone();
            tokens.push(y);
            let h = Hypothesis { tokens, log_prob: lp };
            if y == EOS || t + 1 == cap {
                finished.push(h);
            } else {
                parents.push(i);
                next.push(h);
            }
        }
        if next.is_empty() {
            break;
        }
        dec.reorder(&parents);
        live = next;
    }
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        let better = match &best {
            None => true,
            Some(b) => h.score().total_cmp(&b.score()) == Ordering::Greater,
        };
        if better {
            best = Some(h);
        }
    }
    best.ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()))
}

/// `softmax(scores / tau) * E`: a differentiable stand-in for the embedding
/// of the argmax token.
pub fn soft_argmax(g: &mut Graph, scores: Var, embedding: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Invalid(format!("soft-argmax temperature {tau} must be positive")));
    }
    let s = g.scale(scores, 1.0 / tau)?;
    let p = g.softmax(s)?;
    g.matmul(p, embedding)
}

/// Soft decoding of several sources inside a graph.
#[derive(Clone, Debug)]
pub struct SoftDecoded {
    /// Soft token vectors of every step, `steps * n x D`; row `t * n + i`
    /// belongs to source `i` at step `t`.
    pub soft: Var,
    /// Argmax tokens per source up to (not including) its stop.
    pub argmax: Vec<Vec<usize>>,
    /// Rows of `soft` aligned with `argmax`.
    pub rows: Vec<Vec<usize>>,
}

/// Feeds each step's soft-argmax vector back as the next decoder input.
///
/// Scores are `log P_final` (the logits when copy is off). With
/// `stop_at_eos`, a source stops at its first argmax `<eos>`; otherwise it
/// runs to its cap.
pub fn soft_decode_graph(
    net: &Net,
    g: &mut Graph,
    enc: &Encoded,
    caps: &[usize],
    tau: f64,
    stop_at_eos: bool,
) -> Result<SoftDecoded> {
    let n = enc.rows.len();
    if caps.len() != n {
        return Err(Error::Invalid(format!("{} caps for {n} sources", caps.len())));
    }
    let max_cap = caps.iter().copied().max().unwrap_or(0);
    if max_cap == 0 || max_cap > net.params.config.max_len {
        return Err(Error::Invalid(format!(
            "soft decode length {max_cap} outside 1..={}",
            net.params.config.max_len
        )));
    }
    let v = net.params.config.vocab_size;
    let mut dec = StepDecoder::new(net, g, enc, &(0..n).collect::<Vec<_>>())?;
    let mut x = net.embed_tokens(g, &vec![BOS; n], &vec![0; n])?;
    let mut steps = Vec::with_capacity(max_cap);
    let mut argmax_out = vec![Vec::new(); n];
    let mut rows = vec![Vec::new(); n];
    let mut stopped = vec![false; n];
    for t in 0..max_cap {
        let step = dec.step(net, g, x)?;
        let scores = if net.params.layout.copy.is_some() {
            let p = net.output(g, step.hidden, step.p_att, &enc.source_ids)?;
            g.log_floor(p, LOG_FLOOR)?
        } else {
            net.logits(g, step.hidden)?
        };
        let soft = soft_argmax(g, scores, net.embedding(), tau)?;
        let values = g.value(scores);
        for i in 0..n {
            if stopped[i] || t >= caps[i] {
                stopped[i] = true;
                continue;
            }
            let y = argmax(&values[i * v..(i + 1) * v]);
            if stop_at_eos && y == EOS {
                stopped[i] = true;
                continue;
            }
            argmax_out[i].push(y);
            rows[i].push(t * n + i);
        }
        steps.push(soft);
        if stopped.iter().all(|&s| s) || t + 1 == max_cap {
            break;
        }
        x = net.embed_soft(g, soft, &vec![t + 1; n])?;
    }
    let soft = if steps.len() == 1 { steps[0] } else { g.concat_rows(&steps)? };
    Ok(SoftDecoded {
        soft,
        argmax: argmax_out,
        rows,
    })
}

/// Soft embeddings (`length x D`) for one source in eval mode.
pub fn soft_decode(params: &TransformerParams, source: &[usize], length: usize, tau: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let net = Net::bind(params, &mut g, false)?;
    let enc = net.encode(&mut g, &[source.to_vec()])?;
    let out = soft_decode_graph(&net, &mut g, &enc, &[length], tau, false)?;
    Ok(g.tensor(out.soft))
}
