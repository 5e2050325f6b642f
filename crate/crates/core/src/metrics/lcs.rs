/// Length of the longest common subsequence.
pub fn lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::lcs;

    #[test]
    fn examples() {
        assert_eq!(lcs(&["a", "b", "c", "d"], &["b", "d"]), 2);
        assert_eq!(lcs(&["a", "b"], &["a", "b"]), 2);
        assert_eq!(lcs(&["a"], &["b"]), 0);
        assert_eq!(lcs::<&str>(&[], &["b"]), 0);
        assert_eq!(lcs(&["john", "smith"], &["smith", "john"]), 1);
    }
}
