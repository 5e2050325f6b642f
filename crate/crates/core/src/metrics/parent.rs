use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::lcs::lcs;
use crate::error::{Error, Result};
use crate::table::{lexical_items, tokenize, LexicalMode, Table};

pub const MAX_ORDER: usize = 4;
/// Per-order precision floor inside the geometric mean.
pub const PRECISION_FLOOR: f64 = 1e-9;

/// Fraction of the n-gram's tokens found in the table's lexical items.
pub fn ngram_entailment<S: AsRef<str>>(g: &[S], table_lexical: &BTreeSet<String>) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    let hits = g.iter().filter(|t| table_lexical.contains(t.as_ref())).count();
    hits as f64 / g.len() as f64
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Geometric mean over the orders that exist; zero orders are floored.
fn geometric(orders: &[Option<f64>]) -> (f64, bool) {
    let present: Vec<f64> = orders.iter().flatten().copied().collect();
    if present.is_empty() {
        return (0.0, true);
    }
    let floored = present.iter().any(|&p| p < PRECISION_FLOOR);
    let mean_log = present.iter().map(|p| p.max(PRECISION_FLOOR).ln()).sum::<f64>() / present.len() as f64;
    (mean_log.exp(), floored)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Precision {
    pub value: f64,
    /// `None` for orders longer than the text.
    pub by_order: [Option<f64>; MAX_ORDER],
    pub floored: bool,
}

/// Entailed n-gram precision with an arbitrary per-n-gram weight.
fn weighted_precision<S: AsRef<str>>(text: &[S], weight: impl Fn(&[&str]) -> f64) -> Precision {
    let mut by_order = [None; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        if text.len() < n {
            continue;
        }
        let counts = ngram_counts(text, n);
        let (mut num, mut den) = (0.0, 0.0);
        for (g, c) in &counts {
            num += weight(g) * *c as f64;
            den += *c as f64;
        }
        by_order[n - 1] = Some(num / den);
    }
    let (value, floored) = geometric(&by_order);
    Precision { value, by_order, floored }
}

/// Table-only precision `E_p` and its per-order terms.
pub fn parent_t_precision<S: AsRef<str>>(text: &[S], table_lexical: &BTreeSet<String>) -> Precision {
    weighted_precision(text, |g| ngram_entailment(g, table_lexical))
}

/// Mean over records of `LCS(value tokens, text) / |value tokens|`.
pub fn parent_t_recall<S: AsRef<str>>(table: &Table, text: &[S]) -> f64 {
    let text: Vec<&str> = text.iter().map(AsRef::as_ref).collect();
    let total: f64 = table
        .rows()
        .iter()
        .map(|r| {
            let v = r.value_tokens();
            let v: Vec<&str> = v.iter().map(String::as_str).collect();
            lcs(&v, &text) as f64 / v.len() as f64
        })
        .sum();
    total / table.len() as f64
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub precision_by_order: [Option<f64>; MAX_ORDER],
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub count: usize,
    /// Instances with a floored order or an all-zero precision and recall.
    pub degenerate: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub instances: Vec<InstanceScore>,
}

impl MetricReport {
    /// Corpus means of instance scores, kept in the given order.
    pub fn from_instances(instances: Vec<InstanceScore>) -> Self {
        let n = instances.len();
        let mean = |f: fn(&InstanceScore) -> f64| {
            if n == 0 {
                0.0
            } else {
                instances.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            precision: mean(|s| s.precision),
            recall: mean(|s| s.recall),
            f: mean(|s| s.f),
            count: n,
            degenerate: instances.iter().filter(|s| s.degenerate).count(),
            instances,
        }
    }

    pub fn without_instances(mut self) -> Self {
        self.instances.clear();
        self
    }
}

fn instance(p: Precision, recall: f64) -> InstanceScore {
    let f = harmonic(p.value, recall);
    InstanceScore {
        precision: p.value,
        recall,
        f,
        precision_by_order: p.by_order,
        degenerate: p.floored || p.value + recall == 0.0,
    }
}

/// Instance-level PARENT-T on pre-tokenised text.
pub fn parent_t_instance<S: AsRef<str>>(table: &Table, text: &[S], mode: LexicalMode) -> InstanceScore {
    let lexical = lexical_items(table, mode);
    instance(parent_t_precision(text, &lexical), parent_t_recall(table, text))
}

fn check_lengths(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Invalid(format!("{a} tables but {b} {what}")));
    }
    Ok(())
}

/// Corpus PARENT-T: arithmetic mean of instance scores.
pub fn parent_t(tables: &[Table], generated: &[String], mode: LexicalMode) -> Result<MetricReport> {
    check_lengths("generated texts", tables.len(), generated.len())?;
    let instances = tables
        .iter()
        .zip(generated)
        .map(|(t, g)| parent_t_instance(t, &tokenize(g), mode))
        .collect();
    Ok(MetricReport::from_instances(instances))
}

/// Reference recall: per order, the weighted share of reference n-grams
/// reproduced in the text, weighting each by its table entailment.
fn reference_recall(reference: &[String], text: &[String], table_lexical: &BTreeSet<String>) -> f64 {
    let mut logs = Vec::new();
    for n in 1..=MAX_ORDER {
        let rc = ngram_counts(reference, n);
        let gc = ngram_counts(text, n);
        let (mut num, mut den) = (0.0, 0.0);
        for (g, &c) in &rc {
            let w = ngram_entailment(g, table_lexical);
            num += w * c.min(gc.get(g).copied().unwrap_or(0)) as f64;
            den += w * c as f64;
        }
        if den > 0.0 {
            logs.push((num / den).max(PRECISION_FLOOR).ln());
        }
    }
    if logs.is_empty() {
        0.0
    } else {
        (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    }
}

/// Instance-level PARENT with word-overlap entailment.
pub fn parent_instance(table: &Table, reference: &[String], text: &[String], mode: LexicalMode) -> InstanceScore {
    let lexical = lexical_items(table, mode);
    let ref_ngrams: Vec<BTreeMap<Vec<&str>, usize>> = (1..=MAX_ORDER).map(|n| ngram_counts(reference, n)).collect();
    let p = weighted_precision(text, |g| {
        let in_ref = ref_ngrams[g.len() - 1].contains_key(g);
        let overlap = ngram_entailment(g, &lexical);
        if in_ref {
            1.0
        } else {
            overlap
        }
    });
    let r_ref = reference_recall(reference, text, &lexical);
    let r_table = parent_t_recall(table, text);
    let recall = (r_ref * r_table).sqrt();
    instance(p, recall)
}

pub fn parent(tables: &[Table], references: &[String], generated: &[String], mode: LexicalMode) -> Result<MetricReport> {
    check_lengths("references", tables.len(), references.len())?;
    check_lengths("generated texts", tables.len(), generated.len())?;
    let instances = tables
        .iter()
        .zip(references.iter().zip(generated))
        .map(|(t, (r, g))| parent_instance(t, &tokenize(r), &tokenize(g), mode))
        .collect();
    Ok(MetricReport::from_instances(instances))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn entailment_examples() {
        let t = lex(&["smith"]);
        assert_eq!(ngram_entailment(&["smith", "is"], &t), 0.5);
        assert_eq!(ngram_entailment(&["smith"], &t), 1.0);
        assert_eq!(ngram_entailment(&["is"], &t), 0.0);
    }

    #[test]
    fn hand_precision_example() {
        let p = parent_t_precision(&toks("john smith is an engineer"), &lex(&["john", "smith", "engineer"]));
        let want = [0.6, 0.5, 4.0 / 9.0, 0.5];
        for (got, want) in p.by_order.iter().zip(want) {
            assert!((got.unwrap() - want).abs() < 1e-12);
        }
        let e_p = (0.6f64 * 0.5 * (4.0 / 9.0) * 0.5).powf(0.25);
        assert!((p.value - e_p).abs() < 1e-12);
        assert!((p.value - 0.5081).abs() < 1e-4);
        let f = harmonic(p.value, 1.0);
        assert!((f - 0.6738).abs() < 1e-4);
    }

    #[test]
    fn short_text_uses_existing_orders() {
        let p = parent_t_precision(&toks("a b c"), &lex(&["a", "b", "c"]));
        assert_eq!(p.by_order[3], None);
        assert_eq!(p.value, 1.0);
    }

    #[test]
    fn recall_examples() {
        let t = Table::from_pairs(&[("name", "john smith")]).unwrap();
        assert_eq!(parent_t_recall(&t, &toks("smith john")), 0.5);
        assert_eq!(parent_t_recall(&t, &toks("john smith was here")), 1.0);
        assert_eq!(parent_t_recall(&t, &toks("nothing at all")), 0.0);
    }

    #[test]
    fn empty_overlap_scores_zero() {
        let t = Table::from_pairs(&[("name", "john smith")]).unwrap();
        let s = parent_t_instance(&t, &toks("the of and"), LexicalMode::ValuesOnly);
        assert!(s.f < 1e-8);
        assert!(s.degenerate);
    }

    #[test]
    fn mismatched_lengths() {
        let t = Table::from_pairs(&[("name", "x")]).unwrap();
        assert!(parent_t(&[t], &[], LexicalMode::ValuesOnly).is_err());
    }

    #[test]
    fn parent_with_matching_reference() {
        let t = Table::from_pairs(&[("name", "john smith"), ("job", "engineer")]).unwrap();
        let r = "john smith is an engineer".to_string();
        let s = parent_instance(&t, &toks(&r), &toks(&r), LexicalMode::ValuesOnly);
        assert_eq!(s.precision, 1.0);
        assert_eq!(s.recall, 1.0);
    }
}
