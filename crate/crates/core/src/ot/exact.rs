//! Transportation simplex for small instances.

use super::cost::{check_cost, check_marginal, transport_cost};
use super::ipot::Transport;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const EXACT_MAX_DIM: usize = 12;
const REDUCED_COST_TOL: f64 = 1e-12;
const MAX_PIVOTS: usize = 100_000;

/// Basis of a transportation tableau: `n + m - 1` cells forming a spanning
/// tree over row nodes `0..n` and column nodes `n..n+m`.
struct Basis {
    n: usize,
    m: usize,
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
}

impl Basis {
    fn northwest_corner(mu: &[f64], nu: &[f64]) -> Self {
        let (n, m) = (mu.len(), nu.len());
        let mut supply = mu.to_vec();
        let mut demand = nu.to_vec();
        let mut flow = vec![0.0; n * m];
        let mut cells = Vec::with_capacity(n + m - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = supply[i].min(demand[j]).max(0.0);
            flow[i * m + j] = x;
            supply[i] -= x;
            demand[j] -= x;
            cells.push((i, j));
            if i == n - 1 && j == m - 1 {
                break;
            }
            if j == m - 1 || (i < n - 1 && supply[i] <= demand[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { n, m, cells, flow }
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n + self.m];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.n + j, k));
            adj[self.n + j].push((i, k));
        }
        adj
    }

    /// Dual potentials with `u_0 = 0` on the basis tree.
    fn potentials(&self, c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let adj = self.adjacency();
        let mut pot = vec![f64::NAN; self.n + self.m];
        pot[0] = 0.0;
        let mut stack = vec![0];
        while let Some(node) = stack.pop() {
            for &(next, k) in &adj[node] {
                if pot[next].is_nan() {
                    let (i, j) = self.cells[k];
                    pot[next] = c[i * self.m + j] - pot[node];
                    stack.push(next);
                }
            }
        }
        let v = pot.split_off(self.n);
        (pot, v)
    }

    /// Basis cells on the tree path from column node `j` to row node `i`,
    /// in path order.
    fn path(&self, i: usize, j: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let start = self.n + j;
        let mut via = vec![usize::MAX; self.n + self.m];
        let mut prev = vec![usize::MAX; self.n + self.m];
        let mut seen = vec![false; self.n + self.m];
        seen[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == i {
                break;
            }
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    prev[next] = node;
                    via[next] = k;
                    queue.push_back(next);
                }
            }
        }
        let mut out = Vec::new();
        let mut node = i;
        while node != start {
            out.push(via[node]);
            node = prev[node];
        }
        out.reverse();
        out
    }
}

/// Exact optimal transport by the transportation simplex (northwest-corner
/// start, MODI potentials, Bland's rule on entering and leaving cells).
pub fn exact_ot(c: &Tensor, mu: &[f64], nu: &[f64]) -> Result<Transport> {
    let (n, m) = check_cost(c)?;
    if n > EXACT_MAX_DIM || m > EXACT_MAX_DIM {
        return Err(Error::Invalid(format!(
            "exact OT is limited to {EXACT_MAX_DIM}x{EXACT_MAX_DIM}, got {n}x{m}"
        )));
    }
    check_marginal("mu", mu, n)?;
    check_marginal("nu", nu, m)?;
    let cost = c.data();
    let mut basis = Basis::northwest_corner(mu, nu);
    for _ in 0..MAX_PIVOTS {
        let (u, v) = basis.potentials(cost);
        let mut in_basis = vec![false; n * m];
        for &(i, j) in &basis.cells {
            in_basis[i * m + j] = true;
        }
        // Bland: first improving cell in row-major order.
        let entering = (0..n * m).find(|&k| !in_basis[k] && cost[k] - u[k / m] - v[k % m] < -REDUCED_COST_TOL);
        let Some(e) = entering else {
            let plan = Tensor::matrix(n, m, basis.flow)?;
            let distance = transport_cost(&plan, c);
            return Ok(Transport { plan, distance });
        };
        let (ei, ej) = (e / m, e % m);
        // Cycle: entering cell (+), then path cells alternating -, +, ...
        let path = basis.path(ei, ej);
        let mut leave: Option<(usize, f64, usize)> = None;
        for &k in path.iter().step_by(2) {
            let (i, j) = basis.cells[k];
            let x = basis.flow[i * m + j];
            let key = i * m + j;
            let better = match leave {
                None => true,
                Some((_, best, best_key)) => x < best || (x == best && key < best_key),
            };
            if better {
                leave = Some((k, x, key));
            }
        }
        let (leave_k, theta, _) = leave.ok_or_else(|| Error::Invalid("degenerate transport cycle".into()))?;
        basis.flow[e] += theta;
        for (p, &k) in path.iter().enumerate() {
            let (i, j) = basis.cells[k];
            if p % 2 == 0 {
                basis.flow[i * m + j] -= theta;
            } else {
                basis.flow[i * m + j] += theta;
            }
        }
        let (li, lj) = basis.cells[leave_k];
        basis.flow[li * m + lj] = 0.0;
        basis.cells[leave_k] = (ei, ej);
    }
    Err(Error::Invalid("transportation simplex did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_column_is_forced() {
        let c = Tensor::matrix(2, 1, vec![0.2, 0.4]).unwrap();
        let t = exact_ot(&c, &[0.5, 0.5], &[1.0]).unwrap();
        assert!((t.distance - 0.3).abs() < 1e-15);
    }

    #[test]
    fn finds_off_diagonal_optimum() {
        let c = Tensor::matrix(2, 2, vec![4.0, 1.0, 2.0, 3.0]).unwrap();
        let t = exact_ot(&c, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((t.distance - 1.5).abs() < 1e-12);
        assert_eq!(t.plan.data(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn rejects_large_instances() {
        let c = Tensor::zeros(vec![13, 2]).unwrap();
        let mu = vec![1.0 / 13.0; 13];
        assert!(exact_ot(&c, &mu, &[0.5, 0.5]).is_err());
    }
}
