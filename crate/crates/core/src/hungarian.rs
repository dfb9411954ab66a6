//! Minimum-cost bipartite assignment (Hungarian method with potentials,
//! shortest augmenting paths, O(m²n) for an m×n matrix with m ≤ n).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Injective map from rows (ground-truth segments) to columns (queries).
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    /// `(gt_index, query_index)`, sorted by `gt_index`.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the selected cost entries, accumulated in `gt_index` order.
    pub total_cost: f64,
}

impl MatchAssignment {
    pub fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    /// Query matched to each ground-truth segment.
    pub fn query_of(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == gt).map(|p| p.1)
    }

    /// Ground-truth segment matched to each query, if any.
    pub fn gt_by_query(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(g, q) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }
}

/// Optimal assignment for a `[m, n]` cost matrix, `m <= n`.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchAssignment> {
    let (m, n) = cost.dims2()?;
    if m > n {
        return Err(Error::Data(format!(
            "{m} ground-truth segments cannot be matched to {n} queries"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("matching cost matrix".into()));
    }
    if m == 0 {
        return Ok(MatchAssignment::empty());
    }
    let a = cost.data();
    let at = |i: usize, j: usize| a[(i - 1) * n + (j - 1)];

    // 1-based arrays; index 0 is the virtual start column.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
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
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(g, q)| a[g * n + q]).sum();
    Ok(MatchAssignment { pairs, total_cost })
}
