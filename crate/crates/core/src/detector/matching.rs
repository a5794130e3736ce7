use serde::{Deserialize, Serialize};

use crate::boxes::giou;
use crate::detector::LossWeights;
use crate::error::{Error, Result};
use crate::fogsim::Annotation;

/// One-to-one assignment of ground-truth objects to queries.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, ground truth)` pairs, sorted by query.
    pub pairs: Vec<(usize, usize)>,
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols).
/// Returns the column of each row and the total cost.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Param("cost matrix rows differ in length".into()));
    }
    if n > m {
        return Err(Error::Contract(format!("{n} rows cannot be assigned to {m} columns")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    // Shortest augmenting path with row/column potentials; 1-based with a
    // sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut cols = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            cols[owner[j] - 1] = j - 1;
        }
    }
    let total = cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((cols, total))
}

/// Matching cost between every ground-truth object (rows) and query (cols):
/// `w_cls (1 - p_class) + w_l1 |box - gt|_1 + w_giou (1 - GIoU)`.
pub fn match_costs(
    probs: &[Vec<f64>],
    boxes: &[[f64; 4]],
    gt: &Annotation,
    weights: &LossWeights,
) -> Vec<Vec<f64>> {
    gt.boxes
        .iter()
        .zip(&gt.labels)
        .map(|(g, &label)| {
            probs
                .iter()
                .zip(boxes)
                .map(|(p, b)| {
                    let l1: f64 = b.iter().zip(g).map(|(x, y)| (x - y).abs()).sum();
                    weights.class * (1.0 - p[label]) + weights.l1 * l1 + weights.giou * (1.0 - giou(*b, *g))
                })
                .collect()
        })
        .collect()
}

/// Exact minimum-cost matching of ground truth to queries on detached values.
pub fn hungarian_match(
    probs: &[Vec<f64>],
    boxes: &[[f64; 4]],
    gt: &Annotation,
    weights: &LossWeights,
) -> Result<MatchResult> {
    if gt.len() > boxes.len() {
        return Err(Error::Contract(format!(
            "{} ground-truth objects exceed {} queries",
            gt.len(),
            boxes.len()
        )));
    }
    let cost = match_costs(probs, boxes, gt, weights);
    let (cols, _) = solve_assignment(&cost)?;
    let mut pairs: Vec<(usize, usize)> = cols.into_iter().enumerate().map(|(g, q)| (q, g)).collect();
    pairs.sort_unstable();
    Ok(MatchResult { pairs })
}
