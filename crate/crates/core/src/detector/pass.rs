//! Forward passes with the activations their backward passes need.

use super::{BoxHead, Detector, Rpn};
use crate::geometry::{nms_indices, order_by_score, BoundingBox, BoxCoder};
use crate::nn::{Conv, ConvCache};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Grid;

pub(crate) fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-anchor RPN outputs; anchor `i` owns `deltas[4i..4i+4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnOutput<T> {
    pub logits: Vec<T>,
    pub scores: Vec<T>,
    pub deltas: Vec<T>,
}

impl<T: Scalar> RpnOutput<T> {
    pub fn num_anchors(&self) -> usize {
        self.logits.len()
    }

    pub fn delta(&self, i: usize) -> [T; 4] {
        let d = &self.deltas[4 * i..4 * i + 4];
        [d[0], d[1], d[2], d[3]]
    }

    /// The outputs at the given anchors, in that order.
    pub fn select(&self, anchors: &[usize]) -> RpnOutput<T> {
        RpnOutput {
            logits: anchors.iter().map(|&i| self.logits[i]).collect(),
            scores: anchors.iter().map(|&i| self.scores[i]).collect(),
            deltas: anchors.iter().flat_map(|&i| self.delta(i)).collect(),
        }
    }
}

/// A decoded, clipped region proposal and the anchor it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal<T> {
    pub bbox: BoundingBox<T>,
    pub anchor: usize,
    pub score: T,
}

/// Box-head outputs for `rows` RoIs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub rows: usize,
    /// `rows x (K + 1)`, slot 0 is background.
    pub logits: Vec<T>,
    /// `rows x 4K`.
    pub deltas: Vec<T>,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn logit_width(&self) -> usize {
        if self.rows == 0 {
            0
        } else {
            self.logits.len() / self.rows
        }
    }

    pub fn delta_width(&self) -> usize {
        if self.rows == 0 {
            0
        } else {
            self.deltas.len() / self.rows
        }
    }

    pub fn logits_row(&self, r: usize) -> &[T] {
        let w = self.logit_width();
        &self.logits[r * w..(r + 1) * w]
    }

    pub fn deltas_row(&self, r: usize) -> &[T] {
        let w = self.delta_width();
        &self.deltas[r * w..(r + 1) * w]
    }
}

/// Bilinear sample taps: `(pixel index, weight)` x 4 per RoI bin.
type Taps<T> = [(usize, T); 4];

#[derive(Clone, Debug)]
pub struct HeadTrace<T> {
    pooled: Vec<T>,
    hidden: Vec<T>,
    taps: Vec<Taps<T>>,
    rows: usize,
    feat: (usize, usize, usize),
}

#[derive(Clone, Debug)]
pub struct BackboneTrace<T> {
    pub(crate) stem: Vec<ConvCache<T>>,
    pub(crate) extractor: Vec<ConvCache<T>>,
}

fn conv_chain<T: Scalar>(convs: &[Conv<T>], x: &Grid<T>, keep: bool) -> (Grid<T>, Vec<ConvCache<T>>) {
    let mut caches = Vec::new();
    let mut cur = x.clone();
    for c in convs {
        let (y, cache) = c.forward(&cur, true);
        if keep {
            caches.push(cache);
        }
        cur = y;
    }
    (cur, caches)
}

/// Backpropagates through a conv chain; returns the input gradient if asked.
pub(crate) fn conv_chain_backward<T: Scalar>(
    convs: &[Conv<T>],
    caches: &[ConvCache<T>],
    d_out: Grid<T>,
    mut grads: Option<&mut [Conv<T>]>,
    need_input: bool,
) -> Option<Grid<T>> {
    let mut d = d_out;
    for i in (0..convs.len()).rev() {
        let g = grads.as_deref_mut().map(|gs| &mut gs[i]);
        let wants = i > 0 || need_input;
        match convs[i].backward(&caches[i], &d, true, g, wants) {
            Some(dx) => d = dx,
            None => return None,
        }
    }
    Some(d)
}

impl<T: Scalar> Rpn<T> {
    pub fn forward(&self, x: &Grid<T>) -> RpnOutput<T> {
        let rows = x.h * x.w;
        let logits = self.objectness.forward(&x.data, rows, false);
        let deltas = self.deltas.forward(&x.data, rows, false);
        let scores = logits.iter().map(|&v| sigmoid(v)).collect();
        RpnOutput { logits, scores, deltas }
    }

    /// Gradients w.r.t. every anchor's logit and deltas (full-length slices).
    pub fn backward(
        &self,
        x: &Grid<T>,
        d_logits: &[T],
        d_deltas: &[T],
        grads: Option<&mut Rpn<T>>,
        need_input: bool,
    ) -> Option<Grid<T>> {
        let rows = x.h * x.w;
        let (go, gd) = match grads {
            Some(g) => (Some(&mut g.objectness), Some(&mut g.deltas)),
            None => (None, None),
        };
        let a = self.objectness.backward(&x.data, &[], d_logits, rows, false, go, need_input);
        let b = self.deltas.backward(&x.data, &[], d_deltas, rows, false, gd, need_input);
        match (a, b) {
            (Some(mut a), Some(b)) => {
                a.iter_mut().zip(&b).for_each(|(u, v)| *u += *v);
                Some(Grid {
                    h: x.h,
                    w: x.w,
                    c: x.c,
                    data: a,
                })
            }
            _ => None,
        }
    }
}

/// Bilinear sampling of each RoI on a `pool x pool` grid of bin centres.
///
/// Image coordinate `u` maps to feature coordinate `u / stride - 0.5`
/// (cell centres), clamped to the map.
pub(crate) fn roi_align<T: Scalar>(
    x: &Grid<T>,
    rois: &[BoundingBox<T>],
    pool: usize,
    stride: usize,
) -> (Vec<T>, Vec<Taps<T>>) {
    let d = x.c;
    let mut pooled = vec![T::zero(); rois.len() * pool * pool * d];
    let mut taps = Vec::with_capacity(rois.len() * pool * pool);
    let inv = T::one() / T::of_usize(stride);
    let half = T::of(0.5);
    let maxx = T::of_usize(x.w - 1);
    let maxy = T::of_usize(x.h - 1);
    let pn = T::of_usize(pool);
    for (r, roi) in rois.iter().enumerate() {
        let bw = roi.width() / pn;
        let bh = roi.height() / pn;
        for i in 0..pool {
            let fy = ((roi.y1 + (T::of_usize(i) + half) * bh) * inv - half).max(T::zero()).min(maxy);
            let y0 = fy.floor().to_usize().unwrap_or(0).min(x.h - 1);
            let y1 = (y0 + 1).min(x.h - 1);
            let ly = fy - T::of_usize(y0);
            for j in 0..pool {
                let fx = ((roi.x1 + (T::of_usize(j) + half) * bw) * inv - half).max(T::zero()).min(maxx);
                let x0 = fx.floor().to_usize().unwrap_or(0).min(x.w - 1);
                let x1 = (x0 + 1).min(x.w - 1);
                let lx = fx - T::of_usize(x0);
                let t: Taps<T> = [
                    (y0 * x.w + x0, (T::one() - ly) * (T::one() - lx)),
                    (y0 * x.w + x1, (T::one() - ly) * lx),
                    (y1 * x.w + x0, ly * (T::one() - lx)),
                    (y1 * x.w + x1, ly * lx),
                ];
                let out = &mut pooled[((r * pool + i) * pool + j) * d..][..d];
                for &(p, wgt) in &t {
                    if wgt == T::zero() {
                        continue;
                    }
                    for (o, v) in out.iter_mut().zip(&x.data[p * d..(p + 1) * d]) {
                        *o += wgt * *v;
                    }
                }
                taps.push(t);
            }
        }
    }
    (pooled, taps)
}

impl<T: Scalar> BoxHead<T> {
    pub fn forward(
        &self,
        x: &Grid<T>,
        rois: &[BoundingBox<T>],
        pool: usize,
        stride: usize,
    ) -> (HeadOutput<T>, HeadTrace<T>) {
        let rows = rois.len();
        let (pooled, taps) = roi_align(x, rois, pool, stride);
        let hidden = self.fc.forward(&pooled, rows, true);
        let logits = self.cls.forward(&hidden, rows, false);
        let deltas = self.reg.forward(&hidden, rows, false);
        (
            HeadOutput { rows, logits, deltas },
            HeadTrace {
                pooled,
                hidden,
                taps,
                rows,
                feat: (x.h, x.w, x.c),
            },
        )
    }

    /// Backpropagates output gradients to the parameters and, optionally, to
    /// the feature map.
    pub fn backward(
        &self,
        trace: &HeadTrace<T>,
        d_logits: &[T],
        d_deltas: &[T],
        grads: Option<&mut BoxHead<T>>,
        need_input: bool,
    ) -> Option<Grid<T>> {
        let rows = trace.rows;
        let (h, w, c) = trace.feat;
        if rows == 0 {
            return need_input.then(|| Grid::zeros(h, w, c));
        }
        let (gfc, gcls, greg) = match grads {
            Some(g) => (Some(&mut g.fc), Some(&mut g.cls), Some(&mut g.reg)),
            None => (None, None, None),
        };
        let mut d_hidden = self
            .cls
            .backward(&trace.hidden, &[], d_logits, rows, false, gcls, true)
            .expect("input gradient requested");
        let d2 = self
            .reg
            .backward(&trace.hidden, &[], d_deltas, rows, false, greg, true)
            .expect("input gradient requested");
        d_hidden.iter_mut().zip(&d2).for_each(|(a, b)| *a += *b);
        let d_pooled = self
            .fc
            .backward(&trace.pooled, &trace.hidden, &d_hidden, rows, true, gfc, need_input)?;
        let mut dx = Grid::zeros(h, w, c);
        for (bin, t) in trace.taps.iter().enumerate() {
            let src = &d_pooled[bin * c..(bin + 1) * c];
            for &(p, wgt) in t {
                if wgt == T::zero() {
                    continue;
                }
                for (o, v) in dx.data[p * c..(p + 1) * c].iter_mut().zip(src) {
                    *o += wgt * *v;
                }
            }
        }
        Some(dx)
    }
}

impl<T: Scalar> Detector<T> {
    pub fn stem_features(&self, image: &Grid<T>) -> Grid<T> {
        conv_chain(&self.stem, image, false).0
    }

    /// Feature map of one branch given the stem output.
    pub fn extract(&self, branch: usize, stem_out: &Grid<T>) -> Grid<T> {
        conv_chain(&self.branches[branch].extractor, stem_out, false).0
    }

    /// Forward through stem and branch keeping activations as requested.
    pub(crate) fn backbone_trace(
        &self,
        branch: usize,
        image: &Grid<T>,
        keep_stem: bool,
        keep_extractor: bool,
    ) -> (Grid<T>, BackboneTrace<T>) {
        let (s, stem) = conv_chain(&self.stem, image, keep_stem);
        let (f, extractor) = conv_chain(&self.branches[branch].extractor, &s, keep_extractor);
        (f, BackboneTrace { stem, extractor })
    }

    pub fn anchors(&self, feat_h: usize, feat_w: usize) -> Vec<BoundingBox<T>> {
        super::generate_anchors(
            feat_h,
            feat_w,
            self.config.total_stride(),
            &self.config.anchor_sizes,
            &self.config.anchor_ratios,
        )
    }

    pub fn rpn_forward(&self, features: &Grid<T>) -> RpnOutput<T> {
        self.rpn.forward(features)
    }

    /// Top-scoring decoded anchors: pre-NMS cut, clipping, minimum size,
    /// NMS, then the `k` best survivors in descending score order.
    pub fn proposals(&self, rpn: &RpnOutput<T>, features: &Grid<T>, width: usize, height: usize) -> Vec<Proposal<T>> {
        let cfg = &self.config.rpn;
        let anchors = self.anchors(features.h, features.w);
        let coder = BoxCoder::default();
        let (w, h) = (T::of_usize(width), T::of_usize(height));
        let min = T::of(cfg.min_size);
        let mut cands = Vec::new();
        for i in order_by_score(&rpn.scores).into_iter().take(cfg.pre_nms_top_n) {
            let bbox = coder.decode_unchecked(&anchors[i], &rpn.delta(i)).clip(w, h);
            if bbox.width() >= min && bbox.height() >= min {
                cands.push(Proposal {
                    bbox,
                    anchor: i,
                    score: rpn.scores[i],
                });
            }
        }
        let boxes: Vec<_> = cands.iter().map(|p| p.bbox).collect();
        let scores: Vec<_> = cands.iter().map(|p| p.score).collect();
        nms_indices(&boxes, &scores, T::of(cfg.nms_iou))
            .into_iter()
            .take(cfg.post_nms_top_n)
            .map(|i| cands[i])
            .collect()
    }

    pub fn head_forward(&self, features: &Grid<T>, rois: &[BoundingBox<T>]) -> (HeadOutput<T>, HeadTrace<T>) {
        self.head
            .forward(features, rois, self.config.pool_size, self.config.total_stride())
    }
}
