//! Supervised detection loss and the per-image sampling plan it is evaluated on.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pass::softmax;
use super::{assign_anchors, assign_rois, Detector, MatchLabel, Proposal, RpnOutput, HeadOutput};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, BoxCoder};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Grid;

/// Ground truth for one training image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTargets<T> {
    pub boxes: Vec<BoundingBox<T>>,
    pub classes: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorTarget<T> {
    pub anchor: usize,
    pub positive: bool,
    /// Regression target, meaningful only for positives.
    pub target: [T; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiTarget<T> {
    pub roi: BoundingBox<T>,
    /// Head slot, 0 for background.
    pub label: usize,
    pub target: [T; 4],
}

/// Sampled anchors, sampled RoIs and the distillation RoIs for one image.
///
/// Fixing the plan makes the loss a smooth function of the parameters, which
/// is what the gradient checks rely on.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan<T> {
    pub anchors: Vec<AnchorTarget<T>>,
    pub rois: Vec<RoiTarget<T>>,
    pub distill: Vec<Proposal<T>>,
}

impl<T: Scalar> SamplePlan<T> {
    pub fn roi_boxes(&self) -> Vec<BoundingBox<T>> {
        self.rois.iter().map(|r| r.roi).collect()
    }

    pub fn distill_boxes(&self) -> Vec<BoundingBox<T>> {
        self.distill.iter().map(|p| p.bbox).collect()
    }

    pub fn distill_anchors(&self) -> Vec<usize> {
        self.distill.iter().map(|p| p.anchor).collect()
    }
}

fn pick<R: Rng + ?Sized>(pool: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    let amount = amount.min(pool.len());
    let mut out: Vec<usize> = sample(rng, pool.len(), amount).into_iter().map(|i| pool[i]).collect();
    out.sort_unstable();
    out
}

/// Samples RPN anchors and head RoIs against the ground truth, and takes the
/// `distill_rois` best proposals for distillation.
#[allow(clippy::too_many_arguments)]
pub fn sample_plan<T: Scalar, R: Rng + ?Sized>(
    model: &Detector<T>,
    rpn: &RpnOutput<T>,
    features: &Grid<T>,
    width: usize,
    height: usize,
    targets: &TrainTargets<T>,
    distill_rois: usize,
    rng: &mut R,
) -> Result<SamplePlan<T>> {
    let cfg = &model.config;
    let slots = targets
        .classes
        .iter()
        .map(|&c| {
            model
                .slot_of(c)
                .ok_or_else(|| Error::Labeling(format!("target class {c} is not in the class registry")))
        })
        .collect::<Result<Vec<_>>>()?;
    let gt = &targets.boxes;

    let anchors = model.anchors(features.h, features.w);
    let labels = assign_anchors(&anchors, gt, T::of(cfg.rpn.pos_iou), T::of(cfg.rpn.neg_iou));
    let pos: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], MatchLabel::Positive(_)))
        .collect();
    let neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == MatchLabel::Negative)
        .collect();
    let n_pos = ((cfg.rpn.batch_size as f64 * cfg.rpn.pos_fraction) as usize).min(pos.len());
    let pos = pick(&pos, n_pos, rng);
    let neg = pick(&neg, cfg.rpn.batch_size - pos.len(), rng);
    let rpn_coder = BoxCoder::default();
    let mut anchor_targets = Vec::with_capacity(pos.len() + neg.len());
    for &i in &pos {
        let MatchLabel::Positive(j) = labels[i] else { unreachable!() };
        anchor_targets.push(AnchorTarget {
            anchor: i,
            positive: true,
            target: rpn_coder.encode(&anchors[i], &gt[j])?,
        });
    }
    for &i in &neg {
        anchor_targets.push(AnchorTarget {
            anchor: i,
            positive: false,
            target: [T::zero(); 4],
        });
    }
    anchor_targets.sort_by_key(|a| a.anchor);

    let proposals = model.proposals(rpn, features, width, height);
    let mut cands: Vec<BoundingBox<T>> = proposals.iter().map(|p| p.bbox).collect();
    cands.extend(gt.iter().copied());
    let matches = assign_rois(&cands, gt, T::of(cfg.roi.fg_iou));
    let fg: Vec<usize> = (0..cands.len()).filter(|&i| matches[i].is_some()).collect();
    let bg: Vec<usize> = (0..cands.len()).filter(|&i| matches[i].is_none()).collect();
    let n_fg = ((cfg.roi.batch_size as f64 * cfg.roi.fg_fraction) as usize).min(fg.len());
    let fg = pick(&fg, n_fg, rng);
    let bg = pick(&bg, cfg.roi.batch_size - fg.len(), rng);
    let mut chosen: Vec<usize> = fg.iter().chain(&bg).copied().collect();
    chosen.sort_unstable();
    let head_coder = BoxCoder::new(cfg.roi.box_weights);
    let mut rois = Vec::with_capacity(chosen.len());
    for i in chosen {
        let roi = cands[i];
        rois.push(match matches[i] {
            Some(j) => RoiTarget {
                roi,
                label: slots[j],
                target: head_coder.encode(&roi, &gt[j])?,
            },
            None => RoiTarget {
                roi,
                label: 0,
                target: [T::zero(); 4],
            },
        });
    }

    Ok(SamplePlan {
        anchors: anchor_targets,
        rois,
        distill: proposals.into_iter().take(distill_rois).collect(),
    })
}

/// Loss components of one objective evaluation; each distillation entry is
/// already multiplied by its weight, so [`total`](Self::total) is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub box_cls: f64,
    pub box_reg: f64,
    pub box_distill: f64,
    pub feat_distill: f64,
    pub rpn_distill: f64,
}

impl LossBreakdown {
    pub fn supervised(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.box_cls + self.box_reg
    }

    pub fn distillation(&self) -> f64 {
        self.box_distill + self.feat_distill + self.rpn_distill
    }

    pub fn total(&self) -> f64 {
        self.supervised() + self.distillation()
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }

    pub fn scaled(&self, s: f64) -> Self {
        LossBreakdown {
            rpn_cls: self.rpn_cls * s,
            rpn_reg: self.rpn_reg * s,
            box_cls: self.box_cls * s,
            box_reg: self.box_reg * s,
            box_distill: self.box_distill * s,
            feat_distill: self.feat_distill * s,
            rpn_distill: self.rpn_distill * s,
        }
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.rpn_cls += o.rpn_cls;
        self.rpn_reg += o.rpn_reg;
        self.box_cls += o.box_cls;
        self.box_reg += o.box_reg;
        self.box_distill += o.box_distill;
        self.feat_distill += o.feat_distill;
        self.rpn_distill += o.rpn_distill;
    }
}

/// Loss gradients w.r.t. the network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads<T> {
    pub rpn_logits: Vec<T>,
    pub rpn_deltas: Vec<T>,
    pub head_logits: Vec<T>,
    pub head_deltas: Vec<T>,
}

/// `-(y ln p + (1 - y) ln(1 - p))`, with `0 ln 0 = 0`.
pub fn binary_cross_entropy<T: Scalar>(p: T, target: T) -> T {
    let mut l = T::zero();
    if target != T::zero() {
        l -= target * p.ln();
    }
    if target != T::one() {
        l -= (T::one() - target) * (T::one() - p).ln();
    }
    l
}

/// Huber-style smooth L1 with transition point `beta`.
pub fn smooth_l1<T: Scalar>(x: T, beta: T) -> T {
    let a = x.abs();
    if a < beta {
        T::of(0.5) * x * x / beta
    } else {
        a - T::of(0.5) * beta
    }
}

fn smooth_l1_grad<T: Scalar>(x: T, beta: T) -> T {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Faster R-CNN loss on a fixed plan.
///
/// RPN: mean BCE over sampled anchors plus smooth L1 on positives, both
/// normalized by the sampled anchor count. Head: mean cross-entropy over
/// sampled RoIs plus smooth L1 on the ground-truth class deltas of foreground
/// RoIs, normalized by the RoI count. `head` rows must follow `plan.rois`.
pub fn supervised_loss<T: Scalar>(
    rpn: &RpnOutput<T>,
    head: &HeadOutput<T>,
    plan: &SamplePlan<T>,
    beta: f64,
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    if head.rows != plan.rois.len() {
        return Err(Error::Shape(format!(
            "head has {} rows for {} sampled RoIs",
            head.rows,
            plan.rois.len()
        )));
    }
    let beta = T::of(beta);
    let mut out = LossBreakdown::default();
    let mut g = OutputGrads {
        rpn_logits: vec![T::zero(); rpn.logits.len()],
        rpn_deltas: vec![T::zero(); rpn.deltas.len()],
        head_logits: vec![T::zero(); head.logits.len()],
        head_deltas: vec![T::zero(); head.deltas.len()],
    };

    let na = plan.anchors.len();
    if na > 0 {
        let inv = T::one() / T::of_usize(na);
        let (mut cls, mut reg) = (T::zero(), T::zero());
        for a in &plan.anchors {
            let z = rpn.logits[a.anchor];
            let y = if a.positive { T::one() } else { T::zero() };
            cls += softplus(z) - y * z;
            g.rpn_logits[a.anchor] += (sigmoid(z) - y) * inv;
            if a.positive {
                for j in 0..4 {
                    let diff = rpn.deltas[4 * a.anchor + j] - a.target[j];
                    reg += smooth_l1(diff, beta);
                    g.rpn_deltas[4 * a.anchor + j] += smooth_l1_grad(diff, beta) * inv;
                }
            }
        }
        out.rpn_cls = (cls * inv).f64();
        out.rpn_reg = (reg * inv).f64();
    }

    let nr = plan.rois.len();
    if nr > 0 {
        let inv = T::one() / T::of_usize(nr);
        let (lw, dw) = (head.logit_width(), head.delta_width());
        let (mut cls, mut reg) = (T::zero(), T::zero());
        for (r, t) in plan.rois.iter().enumerate() {
            if t.label >= lw {
                return Err(Error::Labeling(format!(
                    "label slot {} outside a head of width {lw}",
                    t.label
                )));
            }
            let row = head.logits_row(r);
            let p = softmax(row);
            cls -= p[t.label].max(T::min_positive_value()).ln();
            for (s, pv) in p.iter().enumerate() {
                let y = if s == t.label { T::one() } else { T::zero() };
                g.head_logits[r * lw + s] += (*pv - y) * inv;
            }
            if t.label > 0 {
                let base = r * dw + (t.label - 1) * 4;
                for j in 0..4 {
                    let diff = head.deltas[base + j] - t.target[j];
                    reg += smooth_l1(diff, beta);
                    g.head_deltas[base + j] += smooth_l1_grad(diff, beta) * inv;
                }
            }
        }
        out.box_cls = (cls * inv).f64();
        out.box_reg = (reg * inv).f64();
    }
    Ok((out, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert_eq!(binary_cross_entropy(1.0f64, 1.0), 0.0);
        assert!((binary_cross_entropy(0.5f64, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(binary_cross_entropy(0.0f64, 0.0), 0.0);
    }

    #[test]
    fn smooth_l1_is_continuous_at_beta() {
        let b: f64 = 1.0 / 9.0;
        let lo = smooth_l1(b - 1e-12, b);
        let hi = smooth_l1(b + 1e-12, b);
        assert!((lo - hi).abs() < 1e-10);
        assert_eq!(smooth_l1(0.0f64, b), 0.0);
        assert!((smooth_l1(2.0f64, 1.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn single_anchor_rpn_terms() {
        // logit 0 -> probability 0.5 -> ln 2
        let rpn = RpnOutput {
            logits: vec![0.0f64],
            scores: vec![0.5],
            deltas: vec![0.0; 4],
        };
        let head = HeadOutput {
            rows: 0,
            logits: vec![],
            deltas: vec![],
        };
        let plan = SamplePlan {
            anchors: vec![AnchorTarget {
                anchor: 0,
                positive: true,
                target: [0.0; 4],
            }],
            rois: vec![],
            distill: vec![],
        };
        let (l, g) = supervised_loss(&rpn, &head, &plan, 1.0 / 9.0).unwrap();
        assert!((l.rpn_cls - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(l.rpn_reg, 0.0);
        assert!((g.rpn_logits[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn label_outside_head_is_rejected() {
        let rpn = RpnOutput {
            logits: vec![],
            scores: vec![],
            deltas: vec![],
        };
        let head = HeadOutput {
            rows: 1,
            logits: vec![0.0f64, 0.0],
            deltas: vec![0.0; 4],
        };
        let plan = SamplePlan {
            anchors: vec![],
            rois: vec![RoiTarget {
                roi: BoundingBox::new(0.0, 0.0, 1.0, 1.0),
                label: 2,
                target: [0.0; 4],
            }],
            distill: vec![],
        };
        assert!(matches!(
            supervised_loss(&rpn, &head, &plan, 0.1),
            Err(Error::Labeling(_))
        ));
    }
}
