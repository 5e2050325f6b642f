/// Exact-string multiset matching result, as indices into the inputs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HardMatch {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

/// Pairs each item of `a` with the first unused equal item of `b`.
pub fn hard_match<T: PartialEq>(a: &[T], b: &[T]) -> HardMatch {
    let mut used = vec![false; b.len()];
    let mut out = HardMatch::default();
    for (i, x) in a.iter().enumerate() {
        match (0..b.len()).find(|&j| !used[j] && b[j] == *x) {
            Some(j) => {
                used[j] = true;
                out.pairs.push((i, j));
            }
            None => out.unmatched_a.push(i),
        }
    }
    out.unmatched_b = (0..b.len()).filter(|&j| !used[j]).collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiset_semantics() {
        let m = hard_match(&["a", "a", "b"], &["a", "c"]);
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.unmatched_a, vec![1, 2]);
        assert_eq!(m.unmatched_b, vec![1]);
    }

    #[test]
    fn identical_and_disjoint() {
        assert!(hard_match(&["x", "y"], &["y", "x"]).unmatched_a.is_empty());
        let d = hard_match(&["x"], &["y"]);
        assert_eq!((d.unmatched_a.len(), d.unmatched_b.len()), (1, 1));
    }
}
