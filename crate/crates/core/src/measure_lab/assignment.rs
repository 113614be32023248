//! Dense linear assignment by the shortest augmenting path method with
//! row and column potentials.

/// Optimal assignment of a square cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `col_of_row[i]` is the column matched to row `i`.
    pub col_of_row: Vec<usize>,
    pub total_cost: f64,
    /// Dual potentials with `row[i] + col[j] <= cost[i][j]`, tight on the matching.
    pub row_potential: Vec<f64>,
    pub col_potential: Vec<f64>,
}

/// Solves `min sum_i cost[i, col_of_row[i]]` for a row-major `n x n` matrix.
pub fn solve(cost: &[f64], n: usize) -> Assignment {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    // 1-based working arrays; index 0 is the virtual column/row
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui - v[j];
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
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    let total_cost = col_of_row.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Assignment { col_of_row, total_cost, row_potential: u[1..].to_vec(), col_potential: v[1..].to_vec() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute_force(cost: &[f64], n: usize) -> f64 {
        fn go(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row * n + j] + go(cost, n, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(cost, n, 0, &mut vec![false; n])
    }

    #[test]
    fn textbook_instance() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = solve(&cost, 3);
        assert_eq!(a.total_cost, 5.0);
        assert_eq!(a.col_of_row, vec![1, 0, 2]);
    }

    #[test]
    fn matches_enumeration_and_certificate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(1..=7);
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = solve(&cost, n);
            assert!((a.total_cost - brute_force(&cost, n)).abs() < 1e-10);
            let mut seen = vec![false; n];
            for &j in &a.col_of_row {
                assert!(!seen[j]);
                seen[j] = true;
            }
            let dual: f64 = a.row_potential.iter().chain(&a.col_potential).sum();
            assert!((dual - a.total_cost).abs() < 1e-9);
            for i in 0..n {
                for j in 0..n {
                    assert!(a.row_potential[i] + a.col_potential[j] <= cost[i * n + j] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn empty_problem() {
        let a = solve(&[], 0);
        assert!(a.col_of_row.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }
}
