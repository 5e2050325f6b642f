//! Adam, the two-phase training loop and generation from checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{batch_iterator, Batch, BatchIterator, EncodedExample, Vocab};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::losses::{disagreement_loss, mle_loss, ot_loss_with_plan, ot_plan, total_loss, EmbeddingSource, LossReport, LossWeights};
use crate::model::{
    beam_search, greedy, save_checkpoint, soft_decode_graph, Checkpoint, ModelConfig, Net, TransformerParams,
};
use crate::ot::IpotParams;
use crate::table::{is_text_keyword, linearize, NounLexicon, Table};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtMode {
    #[default]
    None,
    /// Every table value token against every decoded step.
    Whole,
    /// Table keywords against decoded steps whose argmax token is a noun.
    Nouns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: u64,
    pub ot_start_step: u64,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    /// Upper bound on `examples * longest sequence` per batch.
    pub token_budget: usize,
    pub warmup_steps: u64,
    /// Global gradient-norm clip, off when `None`.
    pub clip_norm: Option<f64>,
    pub ot_mode: OtMode,
    /// Enables the disagreement term.
    pub latent: bool,
    pub embedding_source: EmbeddingSource,
    /// Soft-argmax temperature.
    pub tau: f64,
    pub ipot: IpotParams,
}

impl TrainConfig {
    /// Small-scale schedule: 2000 steps without OT, then 1000 with it.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-8,
            max_steps: 3000,
            ot_start_step: 2000,
            lambda: 0.1,
            gamma: 0.1,
            seed: 0,
            checkpoint_every: 0,
            token_budget: 512,
            warmup_steps: 0,
            clip_norm: None,
            ot_mode: OtMode::Nouns,
            latent: true,
            embedding_source: EmbeddingSource::TopLayer,
            tau: 0.1,
            // The plan only weights the cost gradient; 100x5 iterations stay
            // within about 1e-4 of the exact distance at a fortieth of the cost.
            ipot: IpotParams {
                beta: 0.1,
                outer: 100,
                inner: 5,
            },
        }
    }

    /// Full-size schedule: flat 1e-5 for 20k steps, then 10k with OT.
    pub fn paper() -> Self {
        Self {
            lr: 1e-5,
            max_steps: 30_000,
            ot_start_step: 20_000,
            token_budget: 4096,
            checkpoint_every: 1000,
            ..Self::desk()
        }
    }

    /// Likelihood only: no disagreement, no OT.
    pub fn mle_only(mut self) -> Self {
        self.latent = false;
        self.ot_mode = OtMode::None;
        self
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
            ot_start_step: self.ot_start_step,
            embedding_source: self.embedding_source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive".into());
        }
        if self.ot_start_step > self.max_steps {
            return fail(format!(
                "ot_start_step {} exceeds max_steps {}",
                self.ot_start_step, self.max_steps
            ));
        }
        if self.token_budget == 0 {
            return fail("token_budget must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau {} must be positive", self.tau));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip_norm {c} must be positive"));
            }
        }
        self.weights().validate()?;
        self.ipot.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Bias-corrected Adam with per-tensor moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &TransformerParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. A non-finite gradient leaves parameters and
    /// moments untouched and returns an error.
    pub fn step(&mut self, params: &mut TransformerParams, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} tensors", grads.len(), params.len())));
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {}", params.names()[i])));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Everything a batch loss needs besides the batch.
pub struct Objective<'a> {
    pub config: &'a TrainConfig,
    pub vocab: &'a Vocab,
    pub lexicon: &'a NounLexicon,
}

impl Objective<'_> {
    /// Builds the step loss. OT joins once `step >= ot_start_step`.
    pub fn batch_loss(&self, net: &Net, g: &mut Graph, batch: &Batch, step: u64) -> Result<(Var, LossReport)> {
        let (loss, report, _) = self.batch_loss_with_plans(net, g, batch, step, None)?;
        Ok((loss, report))
    }

    /// [`Self::batch_loss`] that also returns the transport plans of the OT
    /// term, one per contributing example. Passing them back as `frozen`
    /// reuses them instead of solving again, which makes the loss a smooth
    /// function of the parameters for finite-difference checks.
    pub fn batch_loss_with_plans(
        &self,
        net: &Net,
        g: &mut Graph,
        batch: &Batch,
        step: u64,
        frozen: Option<&[Tensor]>,
    ) -> Result<(Var, LossReport, Vec<Tensor>)> {
        let cfg = self.config;
        let model = &net.params.config;
        let sources: Vec<Vec<usize>> = batch.examples.iter().map(|e| e.source.clone()).collect();
        let targets_in: Vec<Vec<usize>> = batch.examples.iter().map(EncodedExample::target_in).collect();
        let targets_out: Vec<usize> = batch.examples.iter().flat_map(EncodedExample::target_out).collect();

        let enc = net.encode(g, &sources)?;
        let dec = net.decode_teacher(g, &enc, &targets_in, model.copy_enabled)?;
        let probs = net.output(g, dec.hidden, dec.p_att, &enc.source_ids)?;
        let mle = mle_loss(g, probs, &targets_out, model.label_smoothing)?;

        let disagree = if cfg.latent {
            let refs: Vec<Vec<usize>> = batch.examples.iter().map(|e| e.target.clone()).collect();
            Some(match cfg.embedding_source {
                EmbeddingSource::TopLayer => {
                    let text = net.encode(g, &refs)?;
                    disagreement_loss(g, enc.memory, &enc.rows, text.memory, &text.rows)?
                }
                EmbeddingSource::EmbeddingLayer => {
                    let table = net.lookup(g, &enc.source_ids)?;
                    let ids: Vec<usize> = refs.concat();
                    let text = net.lookup(g, &ids)?;
                    let mut text_rows = Vec::with_capacity(refs.len());
                    let mut at = 0;
                    for r in &refs {
                        text_rows.push((at..at + r.len()).collect());
                        at += r.len();
                    }
                    disagreement_loss(g, table, &enc.rows, text, &text_rows)?
                }
            })
        } else {
            None
        };

        let mut ot_degenerate = 0;
        let mut plans = Vec::new();
        let ot = if cfg.ot_mode != OtMode::None && step >= cfg.ot_start_step {
            let (term, skipped) = self.ot_term(net, g, &enc, batch, frozen, &mut plans)?;
            ot_degenerate = skipped;
            term
        } else {
            None
        };

        let total = total_loss(g, mle.loss, disagree, ot, &cfg.weights())?;
        let report = LossReport {
            step,
            mle: g.scalar(mle.loss),
            nll: mle.nll,
            disagree: disagree.map(|d| g.scalar(d)),
            ot: ot.map(|o| g.scalar(o)),
            ot_degenerate,
            total: g.scalar(total),
        };
        Ok((total, report, plans))
    }

    /// Mean OT loss over the batch examples that have keywords on both
    /// sides, and the number skipped.
    fn ot_term(
        &self,
        net: &Net,
        g: &mut Graph,
        enc: &crate::model::Encoded,
        batch: &Batch,
        frozen: Option<&[Tensor]>,
        plans: &mut Vec<Tensor>,
    ) -> Result<(Option<Var>, usize)> {
        let model = &net.params.config;
        let caps: Vec<usize> = batch
            .examples
            .iter()
            .map(|e| (e.target.len() + 10).min(model.max_len - 1).max(1))
            .collect();
        let soft = soft_decode_graph(net, g, enc, &caps, self.config.tau, true)?;
        let mut terms = Vec::new();
        let mut skipped = 0;
        for (i, ex) in batch.examples.iter().enumerate() {
            let table_ids: Vec<usize> = match self.config.ot_mode {
                OtMode::Nouns => ex.source_keywords.tokens.clone(),
                _ => ex.spans.iter().flat_map(|s| s.values.clone()).map(|p| ex.source[p]).collect(),
            };
            let text_rows: Vec<usize> = match self.config.ot_mode {
                OtMode::Nouns => soft.rows[i]
                    .iter()
                    .zip(&soft.argmax[i])
                    .filter(|(_, &y)| is_text_keyword(self.vocab.token(y), self.lexicon))
                    .map(|(&r, _)| r)
                    .collect(),
                _ => soft.rows[i].clone(),
            };
            if table_ids.is_empty() || text_rows.is_empty() {
                skipped += 1;
                continue;
            }
            let x = net.lookup(g, &table_ids)?;
            let y = g.gather_rows(soft.soft, &text_rows)?;
            let plan = match frozen {
                Some(f) => f
                    .get(plans.len())
                    .cloned()
                    .ok_or_else(|| Error::Invalid("fewer frozen plans than OT terms".into()))?,
                None => ot_plan(g, x, y, self.config.ipot)?,
            };
            terms.push(ot_loss_with_plan(g, x, y, &plan)?);
            plans.push(plan);
        }
        if terms.is_empty() {
            return Ok((None, skipped));
        }
        let n = terms.len();
        let sum = if n == 1 { terms[0] } else { g.concat_rows(&terms)? };
        let sum = g.sum(sum)?;
        Ok((Some(g.scale(sum, 1.0 / n as f64)?), skipped))
    }
}

/// Seed of the dropout stream at `step`.
fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step)
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn step_checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("model-{step}.ckpt"))
    }
}

pub struct TrainResult {
    pub params: TransformerParams,
    pub log: Vec<LossReport>,
    /// Steps whose update was skipped for a non-finite gradient.
    pub skipped_steps: Vec<u64>,
}

fn log_text(log: &[LossReport]) -> Result<String> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Stepwise training state. [`train`] drives one to completion; cloning one
/// mid-run and changing its config lets runs that differ only in later
/// phases share the earlier steps.
#[derive(Clone)]
pub struct Trainer<'a> {
    cfg: TrainConfig,
    vocab: &'a Vocab,
    lexicon: &'a NounLexicon,
    params: TransformerParams,
    adam: Adam,
    batches: BatchIterator<'a>,
    step: u64,
    log: Vec<LossReport>,
    skipped_steps: Vec<u64>,
}

impl<'a> Trainer<'a> {
    /// Fresh initialisation. Deterministic given the seeds in `cfg`:
    /// parameters come from `seed`, batch order from `seed + 1` and dropout
    /// masks from a per-step stream.
    pub fn new(
        cfg: &TrainConfig,
        model_cfg: &ModelConfig,
        examples: &'a [EncodedExample],
        vocab: &'a Vocab,
        lexicon: &'a NounLexicon,
    ) -> Result<Self> {
        cfg.validate()?;
        model_cfg.validate()?;
        if model_cfg.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} differs from vocabulary size {}",
                model_cfg.vocab_size,
                vocab.len()
            )));
        }
        if let Some(e) = examples
            .iter()
            .find(|e| e.source.len() > model_cfg.max_len || e.target.len() + 1 > model_cfg.max_len)
        {
            return Err(Error::Config(format!(
                "example of length {} exceeds max_len {}",
                e.length(),
                model_cfg.max_len
            )));
        }
        let params = TransformerParams::init(model_cfg, cfg.seed)?;
        let adam = Adam::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            lexicon,
            params,
            adam,
            batches: batch_iterator(examples, cfg.token_budget, cfg.seed.wrapping_add(1))?,
            step: 0,
            log: Vec::with_capacity(cfg.max_steps as usize),
            skipped_steps: Vec::new(),
        })
    }

    /// Swaps the config for the remaining steps. Seed, batch budget and
    /// optimiser settings must stay as they were.
    pub fn with_config(mut self, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let o = &self.cfg;
        if (cfg.seed, cfg.token_budget) != (o.seed, o.token_budget)
            || (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) != (o.lr, o.beta1, o.beta2, o.eps)
        {
            return Err(Error::Config(
                "a resumed run must keep seed, token_budget and optimiser settings".into(),
            ));
        }
        if cfg.max_steps < self.step {
            return Err(Error::Config(format!(
                "max_steps {} is behind the current step {}",
                cfg.max_steps, self.step
            )));
        }
        self.cfg = cfg.clone();
        Ok(self)
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &TransformerParams {
        &self.params
    }

    pub fn log(&self) -> &[LossReport] {
        &self.log
    }

    fn advance(&mut self, out: Option<&TrainOutput>) -> Result<()> {
        let cfg = &self.cfg;
        let step = self.step;
        let batch = self.batches.next().expect("endless iterator");
        let objective = Objective {
            config: cfg,
            vocab: self.vocab,
            lexicon: self.lexicon,
        };
        let mut g = Graph::training(step_seed(cfg.seed, step));
        let built = Net::bind(&self.params, &mut g, true).and_then(|net| {
            let r = objective.batch_loss(&net, &mut g, &batch, step)?;
            Ok((net, r))
        });
        let (net, (loss, report)) = match built {
            Ok(r) => r,
            Err(e) if e.is_numeric() => {
                if let Some(o) = out {
                    dump_batch(&o.dir.join("nonfinite_batch.json"), step, &batch, self.vocab)?;
                }
                return Err(Error::NonFinite(format!("step {step}, batch {:?}: {e}", batch.indices)));
            }
            Err(e) => return Err(e),
        };
        g.backward(loss)?;
        let mut grads = net.grads(&g);
        if let Some(c) = cfg.clip_norm {
            clip(&mut grads, c);
        }
        let lr = if cfg.warmup_steps > 0 {
            cfg.lr * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            cfg.lr
        };
        match self.adam.step(&mut self.params, &grads, lr) {
            Ok(()) => {}
            Err(e) if e.is_numeric() => {
                eprintln!("step {step}: {e}; update skipped");
                self.skipped_steps.push(step);
            }
            Err(e) => return Err(e),
        }
        self.log.push(report);
        self.step += 1;
        Ok(())
    }

    /// Trains up to `step` (capped at `max_steps`), writing periodic
    /// checkpoints into `out`.
    pub fn run_until(&mut self, step: u64, out: Option<&TrainOutput>) -> Result<()> {
        let stop = step.min(self.cfg.max_steps);
        while self.step < stop {
            self.advance(out)?;
            let done = self.step;
            let every = self.cfg.checkpoint_every;
            if let Some(o) = out {
                if every > 0 && done % every == 0 && done < self.cfg.max_steps {
                    save_checkpoint(&o.step_checkpoint_path(done), &self.params, &self.vocab.hash(), done)?;
                    write_atomic(&o.log_path(), log_text(&self.log)?.as_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Trains to `max_steps` and writes the final checkpoint and log.
    pub fn finish(mut self, out: Option<&TrainOutput>) -> Result<TrainResult> {
        self.run_until(self.cfg.max_steps, out)?;
        if let Some(o) = out {
            save_checkpoint(&o.checkpoint_path(), &self.params, &self.vocab.hash(), self.step)?;
            write_atomic(&o.log_path(), log_text(&self.log)?.as_bytes())?;
        }
        Ok(TrainResult {
            params: self.params,
            log: self.log,
            skipped_steps: self.skipped_steps,
        })
    }
}

/// Trains from a fresh initialisation to `cfg.max_steps`.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    examples: &[EncodedExample],
    vocab: &Vocab,
    lexicon: &NounLexicon,
    out: Option<&TrainOutput>,
) -> Result<TrainResult> {
    Trainer::new(cfg, model_cfg, examples, vocab, lexicon)?.finish(out)
}

fn dump_batch(path: &Path, step: u64, batch: &Batch, vocab: &Vocab) -> Result<()> {
    let dump = serde_json::json!({
        "step": step,
        "indices": batch.indices,
        "sources": batch.examples.iter().map(|e| vocab.decode(&e.source).join(" ")).collect::<Vec<_>>(),
        "targets": batch.examples.iter().map(|e| vocab.decode(&e.target).join(" ")).collect::<Vec<_>>(),
    });
    write_atomic(path, serde_json::to_string_pretty(&dump)?.as_bytes())
}

/// Teacher-forced perplexity `exp(mean token NLL)` in eval mode.
pub fn perplexity(params: &TransformerParams, examples: &[EncodedExample], token_budget: usize) -> Result<f64> {
    let plan = crate::data::plan_batches(examples, token_budget, 0)?;
    let (mut nll, mut tokens) = (0.0, 0usize);
    for idx in plan {
        let batch = Batch::new(examples, &idx);
        let mut g = Graph::new();
        let net = Net::bind(params, &mut g, false)?;
        let sources: Vec<Vec<usize>> = batch.examples.iter().map(|e| e.source.clone()).collect();
        let tin: Vec<Vec<usize>> = batch.examples.iter().map(EncodedExample::target_in).collect();
        let tout: Vec<usize> = batch.examples.iter().flat_map(EncodedExample::target_out).collect();
        let enc = net.encode(&mut g, &sources)?;
        let dec = net.decode_teacher(&mut g, &enc, &tin, params.config.copy_enabled)?;
        let probs = net.output(&mut g, dec.hidden, dec.p_att, &enc.source_ids)?;
        let m = mle_loss(&mut g, probs, &tout, 0.0)?;
        nll += m.nll * m.tokens as f64;
        tokens += m.tokens;
    }
    if tokens == 0 {
        return Err(Error::Invalid("perplexity of an empty corpus".into()));
    }
    Ok((nll / tokens as f64).exp())
}

/// Decodes one text per table; beam 1 is greedy decoding.
pub fn generate_ids(params: &TransformerParams, sources: &[Vec<usize>], beam: usize, max_steps: usize) -> Result<Vec<Vec<usize>>> {
    if beam == 0 {
        return Err(Error::Invalid("beam must be at least 1".into()));
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    if beam == 1 {
        return greedy(params, sources, max_steps);
    }
    sources
        .iter()
        .map(|s| beam_search(params, s, beam, max_steps).map(|h| h.tokens))
        .collect()
}

/// Generates surface text for each table with a checkpoint trained on `vocab`.
pub fn generate(checkpoint: &Checkpoint, vocab: &Vocab, tables: &[Table], beam: usize) -> Result<Vec<String>> {
    let hash = vocab.hash();
    if checkpoint.vocab_hash != hash {
        return Err(Error::Checkpoint(format!(
            "vocabulary hash {hash} does not match checkpoint {}",
            checkpoint.vocab_hash
        )));
    }
    let params = &checkpoint.params;
    let sources: Vec<Vec<usize>> = tables.iter().map(|t| linearize(t, vocab).tokens).collect();
    let ids = generate_ids(params, &sources, beam, params.config.max_len)?;
    Ok(ids.iter().map(|s| vocab.decode_text(s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::ModelConfig;

    fn one_param() -> TransformerParams {
        let mut c = ModelConfig::desk(6);
        c.embed_dim = 4;
        c.factor_dim = 2;
        c.ff_dim = 4;
        c.heads = 1;
        c.blocks = 1;
        TransformerParams::init(&c, 0).unwrap()
    }

    fn grads_like(p: &TransformerParams, v: f64) -> Vec<Vec<f64>> {
        p.tensors().iter().map(|t| vec![v; t.len()]).collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param();
        let before = p.clone();
        let mut a = Adam::new(&p, 1e-3, 0.9, 0.998, 1e-8);
        a.step(&mut p, &grads_like(&before, 0.0), 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = one_param();
        let before = p.clone();
        let mut a = Adam::new(&p, 0.01, 0.9, 0.998, 1e-8);
        a.step(&mut p, &grads_like(&before, -3.0), 0.01).unwrap();
        for (x, y) in p.tensors().iter().zip(before.tensors()) {
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b - 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = one_param();
        let mut a = Adam::new(&p, 0.01, 0.9, 0.998, 1e-8);
        let g = grads_like(&p, 0.5);
        let mut prev = p.tensors()[0].data()[0];
        let mut delta = 0.0;
        for _ in 0..200 {
            a.step(&mut p, &g, 0.01).unwrap();
            let now = p.tensors()[0].data()[0];
            delta = prev - now;
            prev = now;
        }
        assert!((delta - 0.01).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut p = one_param();
        let before = p.clone();
        let mut a = Adam::new(&p, 1e-3, 0.9, 0.998, 1e-8);
        let mut g = grads_like(&before, 0.1);
        g[3][0] = f64::NAN;
        assert!(a.step(&mut p, &g, 1e-3).unwrap_err().is_numeric());
        assert_eq!(p, before);
        assert_eq!(a.steps(), 0);
    }

    #[test]
    fn clipping_scales_to_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        clip(&mut g, 1.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
        let _ = Tensor::scalar(0.0);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        let mut c = TrainConfig::desk();
        c.ot_start_step = c.max_steps + 1;
        assert!(c.validate().is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"lr": 0.5, "ot_mode": "whole"}"#).unwrap();
        assert_eq!((c.lr, c.ot_mode, c.max_steps), (0.5, OtMode::Whole, 3000));
    }
}
