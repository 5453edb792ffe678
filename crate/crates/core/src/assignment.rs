//! Maximum-weight bipartite assignment: every row is matched to a distinct
//! column (rows <= columns). Weights are scaled to integers and solved by
//! shortest augmenting paths with potentials, which is min-cost flow on the
//! bipartite graph specialized to unit capacities.

use crate::error::{DirError, Result};

/// Fixed-point scale for weights. The brute-force oracle in the tests bounds
/// the rounding this introduces.
pub const WEIGHT_SCALE: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct Assignment {
    /// Column index chosen for each row.
    pub row_to_col: Vec<usize>,
    /// Sum of the original (unscaled) weights along the matching.
    pub total_weight: f64,
}

/// Solves max-weight assignment over a dense rows x cols weight matrix.
/// Deterministic: rows are processed in order and column ties resolve to the
/// smallest index, so an all-equal matrix yields the identity matching.
pub fn solve_max_weight(weights: &[Vec<f64>]) -> Result<Assignment> {
    let rows = weights.len();
    if rows == 0 {
        return Ok(Assignment {
            row_to_col: Vec::new(),
            total_weight: 0.0,
        });
    }
    let cols = weights[0].len();
    if rows > cols {
        return Err(DirError::RowsExceedColumns { rows, cols });
    }
    let mut cost = vec![0i64; rows * cols];
    let mut max_scaled = i64::MIN;
    for (r, row) in weights.iter().enumerate() {
        if row.len() != cols {
            return Err(DirError::Invalid(format!(
                "ragged weight matrix: row {r} has {} columns, expected {cols}",
                row.len()
            )));
        }
        for (c, &w) in row.iter().enumerate() {
            if !w.is_finite() {
                return Err(DirError::NonFinite(format!("assignment weight [{r}][{c}]")));
            }
            let scaled = (w * WEIGHT_SCALE).round() as i64;
            cost[r * cols + c] = -scaled;
            max_scaled = max_scaled.max(-scaled);
        }
    }
    // Shift so all costs are non-negative; a uniform shift moves every perfect
    // matching total by the same amount.
    let lo = *cost.iter().min().unwrap();
    if lo < 0 {
        for c in cost.iter_mut() {
            *c -= lo;
        }
    }

    let row_to_col = min_cost_assignment(&cost, rows, cols);
    let total_weight = row_to_col
        .iter()
        .enumerate()
        .map(|(r, &c)| weights[r][c])
        .sum();
    Ok(Assignment {
        row_to_col,
        total_weight,
    })
}

/// Shortest augmenting path assignment with row/column potentials.
/// `cost` is dense row-major, all entries non-negative, rows <= cols.
fn min_cost_assignment(cost: &[i64], rows: usize, cols: usize) -> Vec<usize> {
    const INF: i64 = i64::MAX / 4;
    // Index `cols` plays the role of a virtual start column.
    let mut u = vec![0i64; rows + 1];
    let mut v = vec![0i64; cols + 1];
    let mut col_row = vec![rows; cols + 1]; // rows = unmatched
    let mut way = vec![0usize; cols + 1];

    for r in 0..rows {
        col_row[cols] = r;
        let mut j0 = cols;
        let mut minv = vec![INF; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = INF;
            let mut j1 = cols;
            for j in 0..cols {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 * cols + j] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == rows {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == cols {
                break;
            }
        }
    }

    let mut row_to_col = vec![usize::MAX; rows];
    for j in 0..cols {
        if col_row[j] != rows {
            row_to_col[col_row[j]] = j;
        }
    }
    row_to_col
}

#[cfg(test)]
pub(crate) fn brute_force_max_weight(weights: &[Vec<f64>]) -> f64 {
    // Exhaustive search over all injections of rows into columns.
    fn recur(weights: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == weights.len() {
            if acc > *best {
                *best = acc;
            }
            return;
        }
        for c in 0..weights[row].len() {
            if !used[c] {
                used[c] = true;
                recur(weights, row + 1, used, acc + weights[row][c], best);
                used[c] = false;
            }
        }
    }
    let cols = weights.first().map_or(0, |r| r.len());
    let mut best = f64::NEG_INFINITY;
    let mut used = vec![false; cols];
    recur(weights, 0, &mut used, 0.0, &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_cell() {
        let a = solve_max_weight(&[vec![-2.5]]).unwrap();
        assert_eq!(a.row_to_col, vec![0]);
        assert_eq!(a.total_weight, -2.5);
    }

    #[test]
    fn two_by_two_prefers_cross_matching() {
        let a = solve_max_weight(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(a.row_to_col, vec![1, 0]);
        assert!((a.total_weight - 5.0).abs() < 1e-12);
    }

    #[test]
    fn all_equal_weights_give_identity_matching() {
        let w = vec![vec![1.5; 3]; 3];
        let a = solve_max_weight(&w).unwrap();
        assert_eq!(a.row_to_col, vec![0, 1, 2]);
    }

    #[test]
    fn rectangular_uses_best_columns() {
        // Best pairing sacrifices row 0 (takes 1) so row 1 can keep 9.
        let a = solve_max_weight(&[vec![0.0, 5.0, 1.0], vec![4.0, 9.0, 2.0]]).unwrap();
        assert_eq!(a.row_to_col, vec![2, 1]);
        assert!((a.total_weight - 10.0).abs() < 1e-12);
    }

    #[test]
    fn more_rows_than_columns_is_an_error() {
        let err = solve_max_weight(&[vec![1.0], vec![2.0]]).unwrap_err();
        assert!(err.to_string().contains("2 rows"), "{err}");
    }

    #[test]
    fn non_finite_weight_is_an_error() {
        assert!(solve_max_weight(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..300 {
            let rows = rng.gen_range(1..=6);
            let cols = rng.gen_range(rows..=8);
            let weights: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-30.0..5.0)).collect())
                .collect();
            let solved = solve_max_weight(&weights).unwrap();
            let oracle = brute_force_max_weight(&weights);
            let tol = 1e-5 * oracle.abs().max(1.0);
            assert!(
                (solved.total_weight - oracle).abs() <= tol,
                "trial {trial}: solver {} vs oracle {oracle}",
                solved.total_weight
            );
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..15).map(|_| rng.gen_range(-10.0..0.0)).collect())
            .collect();
        let a = solve_max_weight(&weights).unwrap();
        let b = solve_max_weight(&weights).unwrap();
        assert_eq!(a.row_to_col, b.row_to_col);
    }
}
