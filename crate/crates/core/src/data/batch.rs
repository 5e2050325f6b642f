use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::example::Example;
use super::vocab::{Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::table::{extract_keywords, linearize, KeywordSet, KeywordSource, NounLexicon, SlotSpan};

/// An example mapped to ids, with its keyword sets precomputed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub source: Vec<usize>,
    pub spans: Vec<SlotSpan>,
    /// Reference tokens without `<bos>`/`<eos>`.
    pub target: Vec<usize>,
    pub source_keywords: KeywordSet,
    pub target_keywords: KeywordSet,
}

impl EncodedExample {
    pub fn new(ex: &Example, vocab: &Vocab, lexicon: &NounLexicon) -> Result<Self> {
        let lin = linearize(&ex.table, vocab);
        let target = vocab.encode_text(&ex.text);
        let source_keywords = extract_keywords(&lin.tokens, KeywordSource::Table, lexicon, vocab, Some(&lin.slot_spans))?;
        let target_keywords = extract_keywords(&target, KeywordSource::Text, lexicon, vocab, None)?;
        Ok(Self {
            source: lin.tokens,
            spans: lin.slot_spans,
            target,
            source_keywords,
            target_keywords,
        })
    }

    /// Tokens this example occupies in a batch: the longer of source and
    /// the shifted target (which carries one extra `<bos>`/`<eos>`).
    pub fn length(&self) -> usize {
        self.source.len().max(self.target.len() + 1)
    }

    pub fn target_in(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.target.iter().copied()).collect()
    }

    pub fn target_out(&self) -> Vec<usize> {
        self.target.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

pub fn encode_examples(examples: &[Example], vocab: &Vocab, lexicon: &NounLexicon) -> Result<Vec<EncodedExample>> {
    examples.iter().map(|e| EncodedExample::new(e, vocab, lexicon)).collect()
}

fn pad_rows(rows: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            r.resize(width, PAD);
            r
        })
        .collect()
}

fn pad_masks(masks: Vec<Vec<bool>>) -> Vec<Vec<bool>> {
    let width = masks.iter().map(Vec::len).max().unwrap_or(0);
    masks
        .into_iter()
        .map(|mut m| {
            m.resize(width, false);
            m
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Corpus indices of the member examples.
    pub indices: Vec<usize>,
    pub source: Vec<Vec<usize>>,
    pub source_lengths: Vec<usize>,
    pub target_in: Vec<Vec<usize>>,
    pub target_out: Vec<Vec<usize>>,
    /// Length of `target_in`/`target_out` rows before padding.
    pub target_lengths: Vec<usize>,
    pub source_keyword_mask: Vec<Vec<bool>>,
    pub target_keyword_mask: Vec<Vec<bool>>,
    pub examples: Vec<EncodedExample>,
}

impl Batch {
    pub fn new(corpus: &[EncodedExample], indices: &[usize]) -> Self {
        let examples: Vec<EncodedExample> = indices.iter().map(|&i| corpus[i].clone()).collect();
        let sources: Vec<Vec<usize>> = examples.iter().map(|e| e.source.clone()).collect();
        let tin: Vec<Vec<usize>> = examples.iter().map(EncodedExample::target_in).collect();
        let tout: Vec<Vec<usize>> = examples.iter().map(EncodedExample::target_out).collect();
        Self {
            indices: indices.to_vec(),
            source: pad_rows(&sources),
            source_lengths: sources.iter().map(Vec::len).collect(),
            target_in: pad_rows(&tin),
            target_out: pad_rows(&tout),
            target_lengths: tin.iter().map(Vec::len).collect(),
            source_keyword_mask: pad_masks(examples.iter().map(|e| e.source_keywords.mask(e.source.len())).collect()),
            // Keyword positions index the reference tokens, i.e. `target_out` columns.
            target_keyword_mask: pad_masks(examples.iter().map(|e| e.target_keywords.mask(e.target.len() + 1)).collect()),
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn padded_tokens(&self) -> usize {
        self.examples.iter().map(EncodedExample::length).max().unwrap_or(0) * self.len()
    }

    /// Non-pad target positions, the denominator of per-token losses.
    pub fn target_tokens(&self) -> usize {
        self.target_lengths.iter().sum()
    }
}

/// Groups examples of similar length so that `n * max_len <= budget` per group.
/// Shuffles before the length sort so equal-length examples mix across epochs,
/// and shuffles the final batch order.
pub fn plan_batches(examples: &[EncodedExample], token_budget: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some((i, e)) = examples.iter().enumerate().find(|(_, e)| e.length() > token_budget) {
        return Err(Error::Config(format!(
            "example {i} has length {} above the token budget {token_budget}",
            e.length()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| examples[i].length());

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let len = examples[i].length();
        let grown = longest.max(len);
        if !current.is_empty() && grown * (current.len() + 1) > token_budget {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Endless epoch stream; epoch `k` is planned with seed `shuffle_seed + k`.
#[derive(Clone)]
pub struct BatchIterator<'a> {
    examples: &'a [EncodedExample],
    budget: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

pub fn batch_iterator(examples: &[EncodedExample], token_budget: usize, shuffle_seed: u64) -> Result<BatchIterator<'_>> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot batch an empty corpus".into()));
    }
    let first = plan_batches(examples, token_budget, shuffle_seed)?;
    Ok(BatchIterator {
        examples,
        budget: token_budget,
        seed: shuffle_seed,
        epoch: 0,
        pending: first.into_iter(),
    })
}

impl BatchIterator<'_> {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = match self.pending.next() {
            Some(b) => b,
            None => {
                self.epoch += 1;
                let plan = plan_batches(self.examples, self.budget, self.seed.wrapping_add(self.epoch))
                    .expect("budget already checked");
                self.pending = plan.into_iter();
                self.pending.next()?
            }
        };
        Some(Batch::new(self.examples, &idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::KeywordSet;

    fn fake(len: usize) -> EncodedExample {
        EncodedExample {
            source: vec![5; len],
            spans: vec![],
            target: vec![6; len - 1],
            source_keywords: KeywordSet::default(),
            target_keywords: KeywordSet::default(),
        }
    }

    #[test]
    fn uniform_lengths_fill_budget() {
        let exs: Vec<_> = (0..200).map(|_| fake(100)).collect();
        let plan = plan_batches(&exs, 4096, 3).unwrap();
        assert!(plan.iter().all(|b| b.len() == 40 || b.len() == 200 % 40));
    }

    #[test]
    fn budget_equal_to_max_length_gives_singletons() {
        let exs: Vec<_> = (0..19).map(|_| fake(20)).collect();
        let plan = plan_batches(&exs, 20, 0).unwrap();
        assert!(plan.iter().all(|b| b.len() == 1));
        assert_eq!(plan.len(), 19);
    }

    #[test]
    fn oversize_example_rejected() {
        assert!(plan_batches(&[fake(30)], 29, 0).is_err());
    }

    #[test]
    fn epochs_repeat_for_same_seed() {
        let exs: Vec<_> = (0..50).map(|i| fake(3 + i % 7)).collect();
        let a: Vec<Vec<usize>> = batch_iterator(&exs, 40, 9).unwrap().take(60).map(|b| b.indices).collect();
        let b: Vec<Vec<usize>> = batch_iterator(&exs, 40, 9).unwrap().take(60).map(|b| b.indices).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn shifted_targets() {
        let b = Batch::new(&[fake(3), fake(5)], &[0, 1]);
        assert_eq!(b.target_in[0], vec![BOS, 6, 6, PAD, PAD]);
        assert_eq!(b.target_out[0], vec![6, 6, EOS, PAD, PAD]);
        assert_eq!(b.target_lengths, vec![3, 5]);
        assert!(b.padded_tokens() <= 10);
    }
}
