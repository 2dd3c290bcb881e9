//! Minimum-cost square assignment (Hungarian algorithm, O(n³) potential
//! form). Used by the optimal-matching Dice metric; small sizes only, so the
//! classic dense formulation is plenty.

use crate::error::{Error, Result};

/// Solves the square assignment problem on an `n x n` cost matrix given in
/// row-major order, minimizing total cost. Returns `assign` with
/// `assign[row] = col`, a permutation.
pub fn solve(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    const OP: &str = "hungarian::solve";
    if n == 0 {
        return Err(Error::invalid(OP, "empty assignment problem".to_string()));
    }
    if cost.len() != n * n {
        return Err(Error::shape(OP, format!("[{n} x {n}]"), format!("{} entries", cost.len())));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(OP, "cost matrix must be finite".to_string()));
    }

    // Potentials over rows (u) and columns (v); way[j] remembers the column
    // preceding j on the shortest augmenting path. 1-based arrays with a
    // phantom column 0, following the standard formulation.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (0 = free)
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
        // Augment along the found path.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[f64], n: usize, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum()
}
