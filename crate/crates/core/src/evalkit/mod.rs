//! mAP@50 evaluation: greedy confidence-ordered matching and all-point
//! interpolated average precision.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use crate::boxes::iou;
use crate::boxes::BoxCxCyWh;
use crate::detector::QueryPrediction;
use crate::error::{Error, Result};
use crate::fogsim::Annotation;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPrediction {
    /// Index into the ground-truth list.
    pub image: usize,
    pub bbox: BoxCxCyWh,
    pub category: usize,
    pub confidence: f64,
}

impl EvalPrediction {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Param(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        if self.bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Param(format!("box {:?} outside the unit square", self.bbox)));
        }
        Ok(())
    }
}

/// `(recall, precision)` after each prediction of one category, in
/// descending confidence order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub category: usize,
    pub points: Vec<(f64, f64)>,
}

/// Descending confidence; remaining keys only make ties deterministic.
fn rank(a: &EvalPrediction, b: &EvalPrediction) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.image.cmp(&b.image))
        .then_with(|| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

fn gt_count(gts: &[Annotation], category: usize) -> usize {
    gts.iter().flat_map(|g| &g.labels).filter(|&&l| l == category).count()
}

/// True-positive flags for `category` in ranked order. Each prediction takes
/// the unmatched ground truth of its image with the highest IoU, if that IoU
/// reaches `threshold`.
pub fn match_category(preds: &[EvalPrediction], gts: &[Annotation], category: usize, threshold: f64) -> Vec<bool> {
    let mut ranked: Vec<&EvalPrediction> = preds.iter().filter(|p| p.category == category).collect();
    ranked.sort_by(|a, b| rank(a, b));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|p| {
            let Some(g) = gts.get(p.image) else { return false };
            let best = (0..g.len())
                .filter(|&j| g.labels[j] == category && !taken[p.image][j])
                .map(|j| (j, iou(p.bbox, g.boxes[j])))
                .filter(|&(_, v)| v >= threshold)
                .fold(None::<(usize, f64)>, |acc, c| match acc {
                    Some(a) if a.1 >= c.1 => Some(a),
                    _ => Some(c),
                });
            match best {
                Some((j, _)) => {
                    taken[p.image][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

pub fn pr_curve(preds: &[EvalPrediction], gts: &[Annotation], category: usize, threshold: f64) -> PrCurve {
    let n_gt = gt_count(gts, category).max(1) as f64;
    let mut tp = 0usize;
    let points = match_category(preds, gts, category, threshold)
        .into_iter()
        .enumerate()
        .map(|(k, hit)| {
            tp += hit as usize;
            (tp as f64 / n_gt, tp as f64 / (k + 1) as f64)
        })
        .collect();
    PrCurve { category, points }
}

/// All-point interpolated AP; `None` when the category has no ground truth.
pub fn average_precision(preds: &[EvalPrediction], gts: &[Annotation], category: usize, threshold: f64) -> Option<f64> {
    if gt_count(gts, category) == 0 {
        return None;
    }
    let curve = pr_curve(preds, gts, category, threshold);
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for (r, p) in curve.points {
        recall.push(r);
        precision.push(p);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    Some(
        (1..recall.len())
            .map(|i| (recall[i] - recall[i - 1]) * precision[i])
            .sum(),
    )
}

/// Per-category AP (absent where a category has no ground truth) and their
/// unweighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub per_category: Vec<Option<f64>>,
    pub map50: f64,
}

pub fn map50(preds: &[EvalPrediction], gts: &[Annotation], num_categories: usize) -> Result<MapResult> {
    for p in preds {
        p.validate()?;
    }
    let per_category: Vec<Option<f64>> = (0..num_categories)
        .map(|c| average_precision(preds, gts, c, IOU_THRESHOLD))
        .collect();
    let present: Vec<f64> = per_category.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Contract("no ground-truth boxes in any category".into()));
    }
    Ok(MapResult {
        map50: present.iter().sum::<f64>() / present.len() as f64,
        per_category,
    })
}

/// One prediction per query: the most likely object class and its
/// probability. The no-object column (last) is never a category.
pub fn predictions_from_queries(image: usize, queries: &[QueryPrediction]) -> Vec<EvalPrediction> {
    queries
        .iter()
        .map(|q| {
            let classes = &q.probs[..q.probs.len() - 1];
            let (category, &confidence) = classes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least one object class");
            EvalPrediction {
                image,
                bbox: q.bbox.map(|v| v.clamp(0.0, 1.0)),
                category,
                confidence: confidence.clamp(0.0, 1.0),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Categories without ground truth are omitted.
    pub per_category: BTreeMap<String, f64>,
    pub map50: f64,
    pub split: String,
}

impl EvalReport {
    pub fn new(result: &MapResult, names: &[&str], split: &str) -> Self {
        EvalReport {
            per_category: names
                .iter()
                .zip(&result.per_category)
                .filter_map(|(n, ap)| ap.map(|v| (n.to_string(), v)))
                .collect(),
            map50: result.map50,
            split: split.to_string(),
        }
    }
}

/// Plain-text table with one row per `(model, report)`.
pub fn format_table(names: &[&str], rows: &[(String, EvalReport)]) -> String {
    let mut out = format!("{:<12} {:<10}", "model", "eval set");
    for n in names {
        let _ = write!(out, " {n:>9}");
    }
    out.push_str("       mAP\n");
    for (model, r) in rows {
        let _ = write!(out, "{model:<12} {:<10}", r.split);
        for n in names {
            match r.per_category.get(*n) {
                Some(ap) => {
                    let _ = write!(out, " {ap:>9.3}");
                }
                None => {
                    let _ = write!(out, " {:>9}", "-");
                }
            }
        }
        let _ = writeln!(out, " {:>9.3}", r.map50);
    }
    out
}
