//! Minimum-cost injective assignment of ground truths (rows) to queries
//! (columns).

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `assignment[i]` is the query matched to ground truth `i`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

impl MatchResult {
    /// Query-indexed view: `Some(i)` when query `q` is matched to ground truth `i`.
    pub fn by_query(&self, queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; queries];
        for (i, &q) in self.assignment.iter().enumerate() {
            out[q] = Some(i);
        }
        out
    }
}

/// Shortest-augmenting-path Kuhn–Munkres on an `n × m` matrix, `n ≤ m`,
/// restricted to the rows in `rows` and the columns with `allowed[j]`.
/// Returns the column of each listed row.
fn solve(cost: &[f64], m: usize, rows: &[usize], allowed: &[bool]) -> Vec<usize> {
    let cols: Vec<usize> = (0..m).filter(|&j| allowed[j]).collect();
    let (n, k) = (rows.len(), cols.len());
    debug_assert!(n <= k);
    // 1-based potentials and matching, column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; k + 1];
    let mut owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let c = cost[rows[i0 - 1] * m + cols[j - 1]] - u[i0] - v[j];
                if c < minv[j] {
                    minv[j] = c;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=k {
        if owner[j] != 0 {
            out[owner[j] - 1] = cols[j - 1];
        }
    }
    out
}

fn assignment_cost(cost: &[f64], m: usize, rows: &[usize], cols: &[usize]) -> f64 {
    rows.iter().zip(cols).map(|(&i, &j)| cost[i * m + j]).sum()
}

/// Exact minimum-cost assignment. Among optimal assignments (within a small
/// relative tolerance) the lexicographically smallest vector is returned.
pub fn hungarian_match<T: Real>(cost: &Tensor<T>) -> Result<MatchResult> {
    let (n, m) = cost.dims2()?;
    if n > m {
        return Err(Error::Capacity {
            ground_truths: n,
            queries: m,
        });
    }
    let c: Vec<f64> = cost.data().iter().map(|v| v.as_f64()).collect();
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("hungarian_match", "non-finite cost"));
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let optimal = solve(&c, m, &all_rows, &vec![true; m]);
    let best = assignment_cost(&c, m, &all_rows, &optimal);
    let scale = c.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-9 * scale * n.max(1) as f64;

    // Fix rows one at a time to the smallest column that still admits an
    // optimal completion.
    let mut allowed = vec![true; m];
    let mut assignment = Vec::with_capacity(n);
    let mut fixed = 0.0f64;
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for j in 0..m {
            if !allowed[j] {
                continue;
            }
            allowed[j] = false;
            let completion = if rest.is_empty() {
                0.0
            } else {
                let cols = solve(&c, m, &rest, &allowed);
                assignment_cost(&c, m, &rest, &cols)
            };
            if fixed + c[i * m + j] + completion <= best + tol {
                chosen = Some(j);
                break;
            }
            allowed[j] = true;
        }
        let j = chosen.unwrap_or(optimal[i]);
        allowed[j] = false;
        fixed += c[i * m + j];
        assignment.push(j);
    }
    let total_cost = assignment_cost(&c, m, &all_rows, &assignment);
    Ok(MatchResult {
        assignment,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_row_argmin() {
        let r = hungarian_match(&matrix(&[vec![3.0, 1.0, 2.0]])).unwrap();
        assert_eq!(r.assignment, vec![1]);
        assert_eq!(r.total_cost, 1.0);
    }

    #[test]
    fn diagonal_dominance() {
        let r = hungarian_match(&matrix(&[vec![1.0, 10.0], vec![10.0, 1.0]])).unwrap();
        assert_eq!(r.assignment, vec![0, 1]);
        assert_eq!(r.total_cost, 2.0);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let r = hungarian_match(&matrix(&[vec![1.0; 4], vec![1.0; 4]])).unwrap();
        assert_eq!(r.assignment, vec![0, 1]);
        let r = hungarian_match(&matrix(&[vec![2.0, 1.0, 1.0], vec![1.0, 1.0, 2.0]])).unwrap();
        assert_eq!(r.assignment, vec![1, 0]);
    }

    #[test]
    fn capacity_error() {
        let err = hungarian_match(&Tensor::<f64>::zeros(&[3, 2])).unwrap_err();
        assert!(matches!(
            err,
            Error::Capacity {
                ground_truths: 3,
                queries: 2
            }
        ));
    }

    #[test]
    fn non_finite_cost() {
        let err = hungarian_match(&matrix(&[vec![f64::NAN, 1.0]])).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn query_view() {
        let r = MatchResult {
            assignment: vec![2, 0],
            total_cost: 0.0,
        };
        assert_eq!(r.by_query(3), vec![Some(1), None, Some(0)]);
    }
}
