use std::collections::HashMap;

use crate::error::{Error, Result};

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 against single references. Orders whose clipped match count
/// is zero use add-one smoothing, `(0 + 1) / (total + 1)`.
pub fn bleu4<T: AsRef<str>>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Invalid("BLEU needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refr.len();
        for n in 1..=4 {
            let rc = ngram_counts(refr, n);
            for (g, c) in ngram_counts(cand, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|k| {
            let p = if matches[k] == 0 {
                1.0 / (totals[k] + 1) as f64
            } else {
                matches[k] as f64 / totals[k] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if c_len < r_len { (1.0 - r_len as f64 / c_len as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_is_one() {
        let c = vec![toks("the cat sat on the mat")];
        assert!((bleu4(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_candidate_hand_value() {
        // p1 = p2 = p3 = 1, p4 = (0+1)/(0+1), BP = exp(1 - 4/3).
        let b = bleu4(&[toks("the cat sat")], &[toks("the cat sat down")]).unwrap();
        assert!((b - 0.716_531_310_573_789).abs() < 1e-12, "{b}");
    }

    #[test]
    fn no_overlap_is_near_zero() {
        let cands: Vec<_> = (0..10).map(|_| toks("a b c d e f g h i j")).collect();
        let refs: Vec<_> = (0..10).map(|_| toks("k l m n o p q r s t")).collect();
        assert!(bleu4(&cands, &refs).unwrap() < 0.02);
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(bleu4::<String>(&[], &[]).is_err());
    }
}
