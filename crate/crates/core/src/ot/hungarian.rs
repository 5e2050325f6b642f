use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `perm[row] = column`.
    pub perm: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect assignment on a square matrix (potential-based
/// O(n^3) Hungarian method).
pub fn hungarian(c: &Tensor) -> Result<Assignment> {
    let (n, m) = c.dims();
    if n != m || c.shape().len() != 2 {
        return Err(Error::shape("hungarian", format!("expected a square matrix, got {:?}", c.shape())));
    }
    if !c.is_finite() {
        return Err(Error::Invalid("non-finite assignment cost".into()));
    }
    if n == 0 {
        return Ok(Assignment { perm: vec![], cost: 0.0 });
    }
    let a = |i: usize, j: usize| c.data()[(i - 1) * n + (j - 1)];
    // 1-based potentials; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    let cost = perm.iter().enumerate().map(|(i, &j)| c.data()[i * n + j]).sum();
    Ok(Assignment { perm, cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let c = Tensor::matrix(2, 2, vec![4.0, 1.0, 2.0, 3.0]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.perm, vec![1, 0]);
        assert_eq!(a.cost, 3.0);
    }

    #[test]
    fn zero_diagonal_is_identity() {
        let mut d = vec![9.0; 16];
        for i in 0..4 {
            d[i * 4 + i] = 0.0;
        }
        let a = hungarian(&Tensor::matrix(4, 4, d).unwrap()).unwrap();
        assert_eq!(a.perm, vec![0, 1, 2, 3]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn rejects_rectangular() {
        assert!(hungarian(&Tensor::zeros(vec![2, 3]).unwrap()).is_err());
    }
}
