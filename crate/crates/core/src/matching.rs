//! Optimal one-to-one assignment (Hungarian method) for aligning fitted
//! components with reference components.

use crate::error::{Error, Result};
use crate::numeric::dot;

/// Minimum-cost assignment of rows to distinct columns for a `rows × cols`
/// cost matrix with `rows <= cols`. Returns the column of each row.
///
/// Shortest augmenting path formulation with row/column potentials,
/// `O(rows² · cols)`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|row| row.len() != m) {
        return Err(Error::ShapeMismatch("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::ShapeMismatch(format!(
            "cannot assign {n} rows to {m} columns"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(
            "cost matrix has non-finite entries".into(),
        ));
    }

    // 1-based indices; column 0 is a virtual column holding the row being added
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=m {
                if used[col] {
                    continue;
                }
                let cur = cost[r0 - 1][col - 1] - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=m {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=m {
        if owner[col] != 0 {
            assignment[owner[col] - 1] = col - 1;
        }
    }
    Ok(assignment)
}

/// Pairing of reference and fitted directions maximizing total cosine.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineMatching {
    /// `(reference index, fitted index, cosine)` for each matched pair, in
    /// reference order (or fitted order when there are fewer fitted ones).
    pub pairs: Vec<(usize, usize, f64)>,
}

impl CosineMatching {
    pub fn min_cosine(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).fold(f64::INFINITY, f64::min)
    }

    /// Fitted index matched to `reference`, if any.
    pub fn fitted_for(&self, reference: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == reference).map(|p| p.1)
    }
}

/// Hungarian matching of `fitted` to `reference` unit vectors on cosine
/// similarity. When the counts differ, the smaller set is fully matched.
pub fn match_directions(reference: &[Vec<f64>], fitted: &[Vec<f64>]) -> Result<CosineMatching> {
    if reference.is_empty() || fitted.is_empty() {
        return Err(Error::InvalidInput("nothing to match".into()));
    }
    let dim = reference[0].len();
    if let Some(bad) = reference.iter().chain(fitted).find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let cos = |a: &[f64], b: &[f64]| dot(a, b);
    let pairs = if reference.len() <= fitted.len() {
        let cost: Vec<Vec<f64>> = reference
            .iter()
            .map(|r| fitted.iter().map(|f| -cos(r, f)).collect())
            .collect();
        min_cost_assignment(&cost)?
            .into_iter()
            .enumerate()
            .map(|(r, f)| (r, f, cos(&reference[r], &fitted[f])))
            .collect()
    } else {
        let cost: Vec<Vec<f64>> = fitted
            .iter()
            .map(|f| reference.iter().map(|r| -cos(r, f)).collect())
            .collect();
        min_cost_assignment(&cost)?
            .into_iter()
            .enumerate()
            .map(|(f, r)| (r, f, cos(&reference[r], &fitted[f])))
            .collect()
    };
    Ok(CosineMatching { pairs })
}
