//! Deliberately naive reference implementations used by the verification
//! suites. They share no code with the production matching or evaluation.

use rand::Rng as _;

use crate::boxes::{to_corners, BoxCxCyWh};
use crate::evalkit::EvalPrediction;
use crate::fogsim::Annotation;
use crate::rng::Rng;

/// Minimum total cost over every injective assignment of the smaller side of
/// `cost` into the larger one, by full enumeration.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let at = |i: usize, j: usize| if rows <= cols { cost[i][j] } else { cost[j][i] };
    let (small, large) = (rows.min(cols), rows.max(cols));
    fn go(i: usize, small: usize, large: usize, used: &mut Vec<bool>, acc: f64, at: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
        if i == small {
            *best = best.min(acc);
            return;
        }
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                go(i + 1, small, large, used, acc + at(i, j), at, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, small, large, &mut vec![false; large], 0.0, &at, &mut best);
    best
}

fn overlap(a: BoxCxCyWh, b: BoxCxCyWh) -> f64 {
    let (a, b) = (to_corners(a), to_corners(b));
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    if area_a <= 0.0 || area_b <= 0.0 || w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    w * h / (area_a + area_b - w * h)
}

/// Every partial one-to-one assignment of `preds` (in rank order) to `gts`
/// with IoU at least `threshold`; returns the assignment whose per-prediction
/// key sequence `(iou, -gt index)` is lexicographically largest. Unmatched
/// predictions key below any match. That is the definition of greedy
/// confidence-ordered matching, evaluated without being greedy.
fn best_assignment(preds: &[BoxCxCyWh], gts: &[BoxCxCyWh], threshold: f64) -> Vec<bool> {
    let mut best: Option<(Vec<(f64, i64)>, Vec<bool>)> = None;
    let mut choice = vec![None::<usize>; preds.len()];
    fn go(
        i: usize,
        preds: &[BoxCxCyWh],
        gts: &[BoxCxCyWh],
        threshold: f64,
        choice: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<(f64, i64)>, Vec<bool>)>,
    ) {
        if i == preds.len() {
            let key: Vec<(f64, i64)> = choice
                .iter()
                .enumerate()
                .map(|(p, c)| match c {
                    Some(g) => (overlap(preds[p], gts[*g]), -(*g as i64)),
                    None => (-1.0, 0),
                })
                .collect();
            let better = match best {
                None => true,
                Some((k, _)) => key.iter().zip(k.iter()).map(|(a, b)| a.partial_cmp(b).unwrap()).find(|o| o.is_ne())
                    == Some(std::cmp::Ordering::Greater),
            };
            if better {
                *best = Some((key, choice.iter().map(Option::is_some).collect()));
            }
            return;
        }
        choice[i] = None;
        go(i + 1, preds, gts, threshold, choice, best);
        for g in 0..gts.len() {
            if choice[..i].contains(&Some(g)) || overlap(preds[i], gts[g]) < threshold {
                continue;
            }
            choice[i] = Some(g);
            go(i + 1, preds, gts, threshold, choice, best);
        }
        choice[i] = None;
    }
    go(0, preds, gts, threshold, &mut choice, &mut best);
    best.map(|b| b.1).unwrap_or_default()
}

/// AP by enumerated matching and the definition
/// `AP = (1/n_gt) * sum over true positives k of max_{j >= k} precision(j)`.
pub fn exhaustive_ap(preds: &[EvalPrediction], gts: &[Annotation], category: usize, threshold: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.labels.iter().filter(|&&l| l == category).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<&EvalPrediction> = preds.iter().filter(|p| p.category == category).collect();
    order.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.image.cmp(&b.image))
            .then(a.bbox.partial_cmp(&b.bbox).unwrap())
    });
    let mut hit = vec![false; order.len()];
    for (img, g) in gts.iter().enumerate() {
        let idx: Vec<usize> = (0..order.len()).filter(|&k| order[k].image == img).collect();
        let boxes: Vec<BoxCxCyWh> = idx.iter().map(|&k| order[k].bbox).collect();
        let gt_boxes: Vec<BoxCxCyWh> = (0..g.len()).filter(|&j| g.labels[j] == category).map(|j| g.boxes[j]).collect();
        for (k, m) in idx.iter().zip(best_assignment(&boxes, &gt_boxes, threshold)) {
            hit[*k] = m;
        }
    }
    let precision: Vec<f64> = (0..hit.len())
        .map(|k| hit[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut total = 0.0;
    for k in 0..hit.len() {
        if hit[k] {
            total += precision[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    Some(total / n_gt as f64)
}

pub fn exhaustive_map50(preds: &[EvalPrediction], gts: &[Annotation], num_categories: usize) -> Option<f64> {
    let aps: Vec<f64> = (0..num_categories).filter_map(|c| exhaustive_ap(preds, gts, c, 0.5)).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Random evaluation instance: 1-3 images with at most four ground-truth boxes
/// and four predictions each, predictions jittered around ground truth so
/// that matches and conflicts are common.
pub fn random_eval_instance(rng: &mut Rng, num_categories: usize) -> (Vec<EvalPrediction>, Vec<Annotation>) {
    let images = rng.random_range(1..=3);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let random_box = |rng: &mut Rng| {
        let w: f64 = rng.random_range(0.1..0.4);
        let h: f64 = rng.random_range(0.1..0.4);
        [rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h]
    };
    for image in 0..images {
        let n = rng.random_range(0..=4);
        let mut g = Annotation::default();
        for _ in 0..n {
            g.boxes.push(random_box(rng));
            g.labels.push(rng.random_range(0..num_categories));
        }
        for _ in 0..rng.random_range(0..=4) {
            let mut category = rng.random_range(0..num_categories);
            let bbox = if !g.boxes.is_empty() && rng.random_bool(0.7) {
                let src = rng.random_range(0..g.boxes.len());
                if rng.random_bool(0.8) {
                    category = g.labels[src];
                }
                let t = g.boxes[src];
                let j = |rng: &mut Rng, v: f64, s: f64| (v + rng.random_range(-0.3..0.3) * s).clamp(0.01, 0.99);
                [j(rng, t[0], t[2]), j(rng, t[1], t[3]), j(rng, t[2], t[2]), j(rng, t[3], t[3])]
            } else {
                random_box(rng)
            };
            preds.push(EvalPrediction {
                image,
                bbox,
                category,
                confidence: rng.random_range(0.0..1.0),
            });
        }
        gts.push(g);
    }
    (preds, gts)
}
