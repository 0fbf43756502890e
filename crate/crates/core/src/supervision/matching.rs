use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, target)` pairs sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
    pub unmatched_targets: Vec<usize>,
    /// Sum of matched costs, accumulated in query order.
    pub cost: f64,
}

/// Minimum-cost assignment for `rows ≤ cols`. Returns the column of each row.
fn assign_rows(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols);
    let at = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // p[j]: row assigned to column j (1-based, 0 = none).
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
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
            for j in 0..=cols {
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
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal bipartite matching of queries (rows) to targets (columns).
///
/// Runs in `O(n²m)`; when there are more queries than targets the problem
/// is solved on the transpose.
pub fn hungarian_match(cost: &Tensor) -> MatchResult {
    let (t, g) = (cost.rows(), cost.cols());
    let mut pairs: Vec<(usize, usize)> = if t == 0 || g == 0 {
        Vec::new()
    } else if t <= g {
        assign_rows(cost.data(), t, g).into_iter().enumerate().collect()
    } else {
        let mut tr = vec![0.0; t * g];
        for q in 0..t {
            for k in 0..g {
                tr[k * t + q] = cost.get(q, k);
            }
        }
        assign_rows(&tr, g, t).into_iter().enumerate().map(|(k, q)| (q, k)).collect()
    };
    pairs.sort_unstable();
    let unmatched_queries = (0..t).filter(|q| !pairs.iter().any(|p| p.0 == *q)).collect();
    let unmatched_targets = (0..g).filter(|k| !pairs.iter().any(|p| p.1 == *k)).collect();
    let cost = pairs.iter().map(|&(q, k)| cost.get(q, k)).sum();
    MatchResult { pairs, unmatched_queries, unmatched_targets, cost }
}

/// `|a ∧ b| / |a ∨ b|` with `a` thresholded at 0.5; 0 when both are empty.
pub fn mask_iou(a: &[f64], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "mask lengths differ");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let x = x > 0.5;
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// One supervision target: a thing track over the clip or a stuff class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pub class: u16,
    /// Track id for things, 0 for stuff.
    pub track: u32,
    pub mask: Vec<bool>,
}

/// `cost[q, g] = −p_q(class_g) − IoU(mask_q, mask_g)`.
///
/// `mask_probs` is `N × T` (sigmoid of the mask logits), `class_probs` is
/// `T × (1 + C)`.
pub fn build_cost(mask_probs: &Tensor, class_probs: &Tensor, targets: &[Target]) -> Tensor {
    let (n, t) = (mask_probs.rows(), mask_probs.cols());
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); t];
    for i in 0..n {
        for (q, c) in cols.iter_mut().enumerate() {
            c.push(mask_probs.get(i, q));
        }
    }
    let mut data = Vec::with_capacity(t * targets.len());
    for (q, col) in cols.iter().enumerate() {
        for tg in targets {
            data.push(-class_probs.get(q, tg.class as usize) - mask_iou(col, &tg.mask));
        }
    }
    Tensor::matrix(t, targets.len(), data)
}
