//! Box arithmetic: IoU, anchor-relative encoding, clipping and greedy NMS.
//!
//! All boxes use corner format `(x1, y1, x2, y2)` in pixels. COCO `(x, y, w, h)`
//! boxes are converted at ingestion.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Self {
        BoundingBox { x1, y1, x2, y2 }
    }

    /// Builds a box from COCO `(x, y, w, h)`.
    pub fn from_xywh(x: T, y: T, w: T, h: T) -> Self {
        BoundingBox::new(x, y, x + w, y + h)
    }

    pub fn from_array(a: [T; 4]) -> Self {
        BoundingBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        (self.width().max(T::zero())) * (self.height().max(T::zero()))
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn center(&self) -> (T, T) {
        let half = T::of(0.5);
        ((self.x1 + self.x2) * half, (self.y1 + self.y2) * half)
    }

    /// Clamps the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: T, height: T) -> Self {
        let cx = |v: T| v.max(T::zero()).min(width);
        let cy = |v: T| v.max(T::zero()).min(height);
        BoundingBox::new(cx(self.x1), cy(self.y1), cx(self.x2), cy(self.y2))
    }

    pub fn cast<U: Scalar>(&self) -> BoundingBox<U> {
        BoundingBox::new(
            U::of(self.x1.f64()),
            U::of(self.y1.f64()),
            U::of(self.x2.f64()),
            U::of(self.y2.f64()),
        )
    }

    /// Lexicographic comparison on coordinates; used as a deterministic tie-break.
    pub fn total_cmp(&self, other: &Self) -> Ordering {
        let a = self.to_array().map(|v| v.f64());
        let b = other.to_array().map(|v| v.f64());
        a.iter()
            .zip(&b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

/// A scored, classified box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub bbox: BoundingBox<T>,
    pub class_id: u32,
    pub score: T,
}

/// Intersection over union. Disjoint or zero-area inputs give 0.
pub fn iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

/// Orders indices by descending score, ties by ascending index.
pub(crate) fn order_by_score<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx
}

/// Class-agnostic greedy suppression. Returns kept indices in descending score order.
pub fn nms_indices<T: Scalar>(boxes: &[BoundingBox<T>], scores: &[T], iou_threshold: T) -> Vec<usize> {
    let order = order_by_score(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Per-class greedy NMS. Output scores are non-increasing; ties keep input order.
pub fn nms<T: Scalar>(dets: &[Detection<T>], iou_threshold: T) -> Vec<Detection<T>> {
    let scores: Vec<T> = dets.iter().map(|d| d.score).collect();
    let order = order_by_score(&scores);
    let mut suppressed = vec![false; dets.len()];
    let mut out = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        out.push(dets[i]);
        for &j in &order[pos + 1..] {
            if !suppressed[j]
                && dets[j].class_id == dets[i].class_id
                && iou(&dets[i].bbox, &dets[j].bbox) > iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    out
}

/// Converts boxes to and from anchor-relative deltas
/// `(wx*dx/wa, wy*dy/ha, ww*ln(w/wa), wh*ln(h/ha))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

/// Upper bound on decoded log size ratios, keeps `exp` finite.
const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl Default for BoxCoder {
    fn default() -> Self {
        BoxCoder {
            weights: [1.0, 1.0, 1.0, 1.0],
        }
    }
}

impl BoxCoder {
    pub fn new(weights: [f64; 4]) -> Self {
        BoxCoder { weights }
    }

    pub fn encode<T: Scalar>(&self, anchor: &BoundingBox<T>, target: &BoundingBox<T>) -> Result<[T; 4]> {
        let (aw, ah) = (anchor.width(), anchor.height());
        if !(aw > T::zero() && ah > T::zero()) {
            return Err(Error::InvalidAnchor(format!(
                "anchor {:?} has non-positive size",
                anchor.to_array()
            )));
        }
        let (tw, th) = (target.width(), target.height());
        if !(tw > T::zero() && th > T::zero()) {
            return Err(Error::InvalidAnchor(format!(
                "target {:?} has non-positive size",
                target.to_array()
            )));
        }
        let (acx, acy) = anchor.center();
        let (tcx, tcy) = target.center();
        let w = self.weights.map(T::of);
        Ok([
            w[0] * (tcx - acx) / aw,
            w[1] * (tcy - acy) / ah,
            w[2] * (tw / aw).ln(),
            w[3] * (th / ah).ln(),
        ])
    }

    pub fn decode<T: Scalar>(&self, anchor: &BoundingBox<T>, delta: &[T; 4]) -> Result<BoundingBox<T>> {
        let (aw, ah) = (anchor.width(), anchor.height());
        if !(aw > T::zero() && ah > T::zero()) {
            return Err(Error::InvalidAnchor(format!(
                "anchor {:?} has non-positive size",
                anchor.to_array()
            )));
        }
        Ok(self.decode_unchecked(anchor, delta))
    }

    /// Decode for anchors already known to have positive size.
    pub(crate) fn decode_unchecked<T: Scalar>(&self, anchor: &BoundingBox<T>, delta: &[T; 4]) -> BoundingBox<T> {
        let (aw, ah) = (anchor.width(), anchor.height());
        let (acx, acy) = anchor.center();
        let w = self.weights.map(T::of);
        let cap = T::of(MAX_LOG_RATIO);
        let dx = delta[0] / w[0];
        let dy = delta[1] / w[1];
        let dw = (delta[2] / w[2]).min(cap);
        let dh = (delta[3] / w[3]).min(cap);
        let cx = acx + dx * aw;
        let cy = acy + dy * ah;
        let half = T::of(0.5);
        let pw = aw * dw.exp() * half;
        let ph = ah * dh.exp() * half;
        BoundingBox::new(cx - pw, cy - ph, cx + pw, cy + ph)
    }
}

pub fn encode_box<T: Scalar>(anchor: &BoundingBox<T>, target: &BoundingBox<T>) -> Result<[T; 4]> {
    BoxCoder::default().encode(anchor, target)
}

pub fn decode_box<T: Scalar>(anchor: &BoundingBox<T>, delta: &[T; 4]) -> Result<BoundingBox<T>> {
    BoxCoder::default().decode(anchor, delta)
}
