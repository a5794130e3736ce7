use crate::autodiff::{Tape, Tensor, Var};
use crate::boxes::to_corners;
use crate::detector::{DetectionOutput, LossWeights, MatchResult};
use crate::error::{Error, Result};
use crate::fogsim::Annotation;

/// Individual (unweighted) terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub class: Var,
    pub l1: Option<Var>,
    pub giou: Option<Var>,
    pub total: Var,
}

/// Mean GIoU between matched rows of `pred` (`[k x 4]`, cx/cy/w/h) and
/// constant ground-truth boxes.
pub fn mean_giou(tape: &mut Tape, pred: Var, gt: &[[f64; 4]]) -> Result<Var> {
    let k = gt.len();
    if tape.shape(pred) != [k, 4] || k == 0 {
        return Err(Error::shape("mean_giou", tape.shape(pred), &[k, 4]));
    }
    let col = |tape: &mut Tape, j: usize| tape.slice_cols(pred, j, 1);
    let (cx, cy, w, h) = (col(tape, 0)?, col(tape, 1)?, col(tape, 2)?, col(tape, 3)?);
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let px1 = tape.sub(cx, hw)?;
    let px2 = tape.add(cx, hw)?;
    let py1 = tape.sub(cy, hh)?;
    let py2 = tape.add(cy, hh)?;

    let corners: Vec<[f64; 4]> = gt.iter().map(|&b| to_corners(b)).collect();
    let mut gcol = |j: usize| tape.constant(Tensor::new(vec![k, 1], corners.iter().map(|c| c[j]).collect()).unwrap());
    let (gx1, gy1, gx2, gy2) = (gcol(0), gcol(1), gcol(2), gcol(3));
    let garea = tape.constant(
        Tensor::new(vec![k, 1], corners.iter().map(|c| (c[2] - c[0]) * (c[3] - c[1])).collect()).unwrap(),
    );

    let ix1 = tape.maximum(px1, gx1)?;
    let ix2 = tape.minimum(px2, gx2)?;
    let iy1 = tape.maximum(py1, gy1)?;
    let iy2 = tape.minimum(py2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let parea = tape.mul(w, h)?;
    let both = tape.add(parea, garea)?;
    let union = tape.sub(both, inter)?;

    let cx1 = tape.minimum(px1, gx1)?;
    let cx2 = tape.maximum(px2, gx2)?;
    let cy1 = tape.minimum(py1, gy1)?;
    let cy2 = tape.maximum(py2, gy2)?;
    let cw = tape.sub(cx2, cx1)?;
    let ch = tape.sub(cy2, cy1)?;
    let hull = tape.mul(cw, ch)?;

    let iou = tape.div(inter, union)?;
    let slack = tape.sub(hull, union)?;
    let penalty = tape.div(slack, hull)?;
    let giou = tape.sub(iou, penalty)?;
    Ok(tape.mean(giou))
}

/// Set-prediction loss: weighted cross-entropy over all queries (unmatched
/// queries target the no-object class) plus L1 and GIoU terms over matched
/// pairs, each averaged over the ground-truth count.
pub fn detection_loss(
    tape: &mut Tape,
    pred: &DetectionOutput,
    gt: &Annotation,
    matching: &MatchResult,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let m = tape.shape(pred.class_logits)[0];
    let no_object = tape.shape(pred.class_logits)[1] - 1;
    let mut targets = vec![no_object; m];
    let mut row_w = vec![weights.no_object; m];
    for &(q, g) in &matching.pairs {
        if q >= m || g >= gt.len() {
            return Err(Error::Contract(format!("match pair ({q}, {g}) out of range")));
        }
        targets[q] = gt.labels[g];
        row_w[q] = 1.0;
    }
    if row_w.iter().all(|&w| w == 0.0) {
        row_w.iter_mut().for_each(|w| *w = 1.0);
    }
    let class = tape.cross_entropy(pred.class_logits, &targets, &row_w)?;
    let mut total = tape.scale(class, weights.class);
    let (mut l1, mut giou) = (None, None);
    if !matching.pairs.is_empty() {
        let q_idx: Vec<usize> = matching.pairs.iter().map(|p| p.0).collect();
        let gt_boxes: Vec<[f64; 4]> = matching.pairs.iter().map(|p| gt.boxes[p.1]).collect();
        let k = gt_boxes.len();
        let pb = tape.gather_rows(pred.boxes, &q_idx)?;
        let gb = tape.constant(Tensor::new(vec![k, 4], gt_boxes.iter().flatten().copied().collect())?);
        let diff = tape.sub(pb, gb)?;
        let abs = tape.abs(diff);
        let l1_sum = tape.sum(abs);
        let l1_term = tape.scale(l1_sum, 1.0 / k as f64);
        let g = mean_giou(tape, pb, &gt_boxes)?;
        let neg = tape.scale(g, -1.0);
        let giou_term = tape.add_scalar(neg, 1.0);
        let wl1 = tape.scale(l1_term, weights.l1);
        let wg = tape.scale(giou_term, weights.giou);
        total = tape.add(total, wl1)?;
        total = tape.add(total, wg)?;
        l1 = Some(l1_term);
        giou = Some(giou_term);
    }
    Ok(LossTerms {
        class,
        l1,
        giou,
        total,
    })
}
