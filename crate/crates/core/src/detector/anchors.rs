use crate::geometry::{iou, BoundingBox};
use crate::scalar::Scalar;

/// Anchors over a `feat_h x feat_w` map, index `(y * feat_w + x) * A + a`
/// with `a = size_index * ratios.len() + ratio_index`. Ratios are `h / w`.
pub fn generate_anchors<T: Scalar>(
    feat_h: usize,
    feat_w: usize,
    stride: usize,
    sizes: &[f64],
    ratios: &[f64],
) -> Vec<BoundingBox<T>> {
    let mut shapes = Vec::with_capacity(sizes.len() * ratios.len());
    for &s in sizes {
        for &r in ratios {
            let w = s / r.sqrt();
            let h = s * r.sqrt();
            shapes.push((w / 2.0, h / 2.0));
        }
    }
    let st = stride as f64;
    let mut out = Vec::with_capacity(feat_h * feat_w * shapes.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let (cx, cy) = ((x as f64 + 0.5) * st, (y as f64 + 0.5) * st);
            for &(hw, hh) in &shapes {
                out.push(BoundingBox::new(
                    T::of(cx - hw),
                    T::of(cy - hh),
                    T::of(cx + hw),
                    T::of(cy + hh),
                ));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLabel {
    /// Matched to the ground-truth box at this index.
    Positive(usize),
    Negative,
    Ignored,
}

/// Best ground truth per anchor, ties to the lowest index.
fn best_match<T: Scalar>(anchor: &BoundingBox<T>, gt: &[BoundingBox<T>]) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (j, g) in gt.iter().enumerate() {
        let v = iou(anchor, g);
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// RPN labelling: positive at `IoU >= pos_thr`, negative below `neg_thr`,
/// ignored in between. Every ground truth also claims the anchors that reach
/// its highest IoU (when that IoU is non-zero); such anchors keep their own
/// best-matching ground truth.
pub fn assign_anchors<T: Scalar>(
    anchors: &[BoundingBox<T>],
    gt: &[BoundingBox<T>],
    pos_thr: T,
    neg_thr: T,
) -> Vec<MatchLabel> {
    if gt.is_empty() {
        return vec![MatchLabel::Negative; anchors.len()];
    }
    let ious: Vec<Vec<T>> = anchors
        .iter()
        .map(|a| gt.iter().map(|g| iou(a, g)).collect())
        .collect();
    let mut labels: Vec<MatchLabel> = anchors
        .iter()
        .map(|a| {
            let (j, v) = best_match(a, gt);
            if v >= pos_thr {
                MatchLabel::Positive(j)
            } else if v < neg_thr {
                MatchLabel::Negative
            } else {
                MatchLabel::Ignored
            }
        })
        .collect();
    for j in 0..gt.len() {
        let top = ious.iter().map(|row| row[j]).fold(T::zero(), T::max);
        if top <= T::zero() {
            continue;
        }
        for (i, row) in ious.iter().enumerate() {
            if row[j] == top {
                labels[i] = MatchLabel::Positive(best_match(&anchors[i], gt).0);
            }
        }
    }
    labels
}

/// Box-head labelling: foreground (matched index) at `IoU >= thr`, else background.
pub fn assign_rois<T: Scalar>(rois: &[BoundingBox<T>], gt: &[BoundingBox<T>], thr: T) -> Vec<Option<usize>> {
    rois.iter()
        .map(|r| {
            if gt.is_empty() {
                return None;
            }
            let (j, v) = best_match(r, gt);
            (v >= thr).then_some(j)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox<f64> {
        BoundingBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn anchor_layout() {
        let a: Vec<BoundingBox<f64>> = generate_anchors(2, 3, 4, &[8.0], &[0.5, 1.0, 2.0]);
        assert_eq!(a.len(), 2 * 3 * 3);
        // location (y=1, x=2), ratio 1
        let sq = a[(3 + 2) * 3 + 1];
        assert_eq!(sq, b(6.0, 2.0, 14.0, 10.0));
        let tall = a[2];
        assert!((tall.height() / tall.width() - 2.0).abs() < 1e-12);
        assert!((tall.area() - 64.0).abs() < 1e-9);
    }

    #[test]
    fn anchor_thresholds() {
        let gt = [b(0.0, 0.0, 10.0, 10.0)];
        let anchors = [
            b(0.0, 0.0, 10.0, 10.0),
            b(0.0, 0.0, 10.0, 5.0),   // 0.5: ignored
            b(20.0, 20.0, 30.0, 30.0), // 0: negative
        ];
        let l = assign_anchors(&anchors, &gt, 0.7, 0.3);
        assert_eq!(l, vec![MatchLabel::Positive(0), MatchLabel::Ignored, MatchLabel::Negative]);
    }

    #[test]
    fn low_quality_best_anchor_becomes_positive() {
        let gt = [b(0.0, 0.0, 10.0, 10.0)];
        let anchors = [b(0.0, 0.0, 10.0, 4.0), b(0.0, 0.0, 10.0, 2.0)];
        let l = assign_anchors(&anchors, &gt, 0.7, 0.3);
        assert_eq!(l, vec![MatchLabel::Positive(0), MatchLabel::Negative]);
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let anchors = [b(0.0, 0.0, 4.0, 4.0)];
        assert_eq!(assign_anchors(&anchors, &[], 0.7, 0.3), vec![MatchLabel::Negative]);
        assert_eq!(assign_rois(&anchors, &[], 0.5), vec![None]);
    }

    #[test]
    fn roi_foreground_threshold() {
        let gt = [b(0.0, 0.0, 10.0, 10.0), b(20.0, 20.0, 30.0, 30.0)];
        let rois = [b(0.0, 0.0, 10.0, 5.0), b(0.0, 0.0, 10.0, 4.0), b(21.0, 20.0, 30.0, 30.0)];
        assert_eq!(assign_rois(&rois, &gt, 0.5), vec![Some(0), None, Some(1)]);
    }
}
