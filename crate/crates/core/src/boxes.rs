//! Box geometry on normalized `(cx, cy, w, h)` boxes.

pub type BoxCxCyWh = [f64; 4];

pub fn to_corners(b: BoxCxCyWh) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

fn area(c: [f64; 4]) -> f64 {
    (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0)
}

/// Intersection over union of two corner-form boxes; 0 when either is degenerate.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let inter = area([a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    inter / (aa + ab - inter)
}

pub fn iou(a: BoxCxCyWh, b: BoxCxCyWh) -> f64 {
    iou_corners(to_corners(a), to_corners(b))
}

/// Generalized IoU: `iou - (|C| - |union|) / |C|` with `C` the smallest
/// enclosing box. In `[-1, 1]`.
pub fn giou(a: BoxCxCyWh, b: BoxCxCyWh) -> f64 {
    let (a, b) = (to_corners(a), to_corners(b));
    let (aa, ab) = (area(a), area(b));
    let inter = area([a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = aa + ab - inter;
    let hull = area([a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]);
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = [0.5, 0.5, 0.2, 0.4];
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, [0.9, 0.9, 0.1, 0.1]), 0.0);
        assert!((iou_corners([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(a, [0.5, 0.5, 0.0, 0.3]), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = [0.5, 0.5, 0.2, 0.2];
        assert!((giou(a, a) - 1.0).abs() < 1e-15);
        // disjoint unit-area boxes: hull 2x... corners (0,0,1,1),(2,0,3,1): hull 3, union 2
        let g = giou([0.5, 0.5, 1.0, 1.0], [2.5, 0.5, 1.0, 1.0]);
        assert!((g - (0.0 - 1.0 / 3.0)).abs() < 1e-15);
    }
}
