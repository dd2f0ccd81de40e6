//! Compact two-stage detector.
//!
//! Image -> stem `B` -> extractor `F` (one per branch) -> feature map ->
//! anchor RPN -> top-k proposals -> bilinear RoI pooling -> box head
//! (class logits including background, per-class box deltas).

mod anchors;
mod checkpoint;
mod loss;
mod pass;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{nms, BoundingBox, BoxCoder, Detection};
use crate::nn::{Conv, Linear};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Grid, Tensor};

pub use anchors::{assign_anchors, assign_rois, generate_anchors, MatchLabel};
pub use checkpoint::{CheckpointMeta, BranchMeta};
pub use loss::{
    binary_cross_entropy, sample_plan, smooth_l1, supervised_loss, AnchorTarget, LossBreakdown,
    OutputGrads, RoiTarget, SamplePlan, TrainTargets,
};
pub use pass::{BackboneTrace, HeadOutput, HeadTrace, Proposal, RpnOutput};
pub(crate) use pass::conv_chain_backward;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub stride: usize,
}

/// RPN matching, sampling, and proposal settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnSettings {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub batch_size: usize,
    pub pos_fraction: f64,
    pub pre_nms_top_n: usize,
    /// `k`: proposals kept after NMS.
    pub post_nms_top_n: usize,
    pub nms_iou: f64,
    pub min_size: f64,
}

/// Box-head RoI sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSettings {
    pub fg_iou: f64,
    pub batch_size: usize,
    pub fg_fraction: f64,
    pub box_weights: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub image_size: u32,
    pub in_channels: usize,
    pub stem: Vec<ConvSpec>,
    pub extractor: Vec<ConvSpec>,
    /// Anchor side lengths in pixels (square-equivalent).
    pub anchor_sizes: Vec<f64>,
    /// Anchor aspect ratios `h / w`.
    pub anchor_ratios: Vec<f64>,
    pub pool_size: usize,
    pub head_hidden: usize,
    pub rpn: RpnSettings,
    pub roi: RoiSettings,
    pub smooth_l1_beta: f64,
    pub detections_per_image: usize,
}

impl Default for DetectorConfig {
    /// Desk-scale layout for 32x32 inputs: total stride 4, 8x8x24 feature map,
    /// 2 sizes x 3 ratios = 6 anchors per location.
    fn default() -> Self {
        DetectorConfig {
            image_size: 32,
            in_channels: 3,
            stem: vec![
                ConvSpec { channels: 12, stride: 2 },
                ConvSpec { channels: 24, stride: 2 },
            ],
            extractor: vec![
                ConvSpec { channels: 24, stride: 1 },
                ConvSpec { channels: 24, stride: 1 },
            ],
            anchor_sizes: vec![8.0, 14.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pool_size: 4,
            head_hidden: 64,
            rpn: RpnSettings {
                pos_iou: 0.6,
                neg_iou: 0.3,
                batch_size: 64,
                pos_fraction: 0.5,
                pre_nms_top_n: 128,
                post_nms_top_n: 32,
                nms_iou: 0.7,
                min_size: 1.0,
            },
            roi: RoiSettings {
                fg_iou: 0.5,
                batch_size: 32,
                fg_fraction: 0.25,
                box_weights: [10.0, 10.0, 5.0, 5.0],
            },
            smooth_l1_beta: 1.0 / 9.0,
            detections_per_image: 50,
        }
    }
}

impl DetectorConfig {
    pub fn total_stride(&self) -> usize {
        self.stem.iter().chain(&self.extractor).map(|c| c.stride).product()
    }

    pub fn anchors_per_location(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }

    pub fn feature_size(&self) -> usize {
        self.image_size as usize / self.total_stride()
    }

    pub fn feature_depth(&self) -> usize {
        self.extractor
            .last()
            .or(self.stem.last())
            .map_or(self.in_channels, |c| c.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.stem.is_empty() || self.extractor.is_empty() {
            return bad("stem and extractor each need at least one conv layer");
        }
        if self
            .stem
            .iter()
            .chain(&self.extractor)
            .any(|c| c.channels == 0 || c.stride == 0)
        {
            return bad("conv layers need positive channels and stride");
        }
        if self.in_channels == 0 || self.image_size == 0 {
            return bad("image dimensions must be positive");
        }
        if self.image_size as usize % self.total_stride() != 0 {
            return bad("image_size must be divisible by the total stride");
        }
        if self.anchor_sizes.is_empty()
            || self.anchor_ratios.is_empty()
            || self.anchor_sizes.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0))
        {
            return bad("anchor sizes and ratios must be positive and non-empty");
        }
        if self.pool_size == 0 || self.head_hidden == 0 {
            return bad("pool_size and head_hidden must be positive");
        }
        let r = &self.rpn;
        if !(0.0..=1.0).contains(&r.pos_iou) || !(0.0..=1.0).contains(&r.neg_iou) || r.pos_iou < r.neg_iou {
            return bad("RPN thresholds need 0 <= neg_iou <= pos_iou <= 1");
        }
        if r.batch_size == 0 || r.post_nms_top_n == 0 || r.pre_nms_top_n == 0 {
            return bad("RPN batch and proposal counts must be positive");
        }
        if self.roi.batch_size == 0 || !(0.0..=1.0).contains(&self.roi.fg_iou) {
            return bad("RoI batch must be positive and fg_iou in [0, 1]");
        }
        if self.roi.box_weights.iter().any(|w| !(*w > 0.0)) || !(self.smooth_l1_beta > 0.0) {
            return bad("box weights and smooth-L1 beta must be positive");
        }
        Ok(())
    }
}

/// One extractor `F` and the classes it was introduced with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch<T> {
    pub step: usize,
    pub classes: Vec<u32>,
    pub extractor: Vec<Conv<T>>,
}

/// 1x1 objectness and delta predictors over the feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rpn<T> {
    pub objectness: Linear<T>,
    pub deltas: Linear<T>,
}

/// Box head: hidden FC, class logits `[background, registry...]`, per-class deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxHead<T> {
    pub fc: Linear<T>,
    pub cls: Linear<T>,
    pub reg: Linear<T>,
}

impl<T: Scalar> BoxHead<T> {
    pub fn num_classes(&self) -> usize {
        self.cls.out_features() - 1
    }

    pub fn zeros_like(&self) -> Self {
        BoxHead {
            fc: self.fc.zeros_like(),
            cls: self.cls.zeros_like(),
            reg: self.reg.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        [&self.fc, &self.cls, &self.reg]
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

impl<T: Scalar> Rpn<T> {
    pub fn zeros_like(&self) -> Self {
        Rpn {
            objectness: self.objectness.zeros_like(),
            deltas: self.deltas.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        [&self.objectness, &self.deltas]
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// A named parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Stem,
    Branch(usize),
    Rpn,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector<T> {
    pub config: DetectorConfig,
    pub stem: Vec<Conv<T>>,
    pub branches: Vec<Branch<T>>,
    pub rpn: Rpn<T>,
    pub head: BoxHead<T>,
    /// Head slot `i + 1` predicts class `registry[i]`; slot 0 is background.
    pub registry: Vec<u32>,
    pub seed: u64,
}

pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z = (z ^ (z >> 33)).wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    z ^ (z >> 33)
}

fn conv_stack<T: Scalar>(in_c: usize, specs: &[ConvSpec], rng: &mut ChaCha8Rng) -> Vec<Conv<T>> {
    let mut c = in_c;
    specs
        .iter()
        .map(|s| {
            let conv = Conv::new(c, s.channels, s.stride, rng);
            c = s.channels;
            conv
        })
        .collect()
}

fn head_rows<T: Scalar>(hidden: usize, rows: usize, std: f64, rng: &mut ChaCha8Rng) -> Linear<T> {
    Linear::new(hidden, rows, std, rng)
}

const CLS_STD: f64 = 0.01;
const REG_STD: f64 = 0.001;

impl<T: Scalar> Detector<T> {
    /// Registers classes `1..=num_classes`.
    pub fn new(config: DetectorConfig, num_classes: usize, seed: u64) -> Result<Self> {
        let classes: Vec<u32> = (1..=num_classes as u32).collect();
        Self::with_classes(config, &classes, seed)
    }

    pub fn with_classes(config: DetectorConfig, classes: &[u32], seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() {
            return Err(Error::config("a detector needs at least one class"));
        }
        let unique: HashSet<u32> = classes.iter().copied().collect();
        if unique.len() != classes.len() || unique.contains(&0) {
            return Err(Error::config("class ids must be unique and non-zero"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let stem = conv_stack(config.in_channels, &config.stem, &mut rng);
        let extractor = conv_stack(config.stem.last().unwrap().channels, &config.extractor, &mut rng);
        let d = config.feature_depth();
        let a = config.anchors_per_location();
        let rpn = Rpn {
            objectness: Linear::new(d, a, 0.01, &mut rng),
            deltas: Linear::new(d, 4 * a, 0.01, &mut rng),
        };
        let pooled = config.pool_size * config.pool_size * d;
        let k = classes.len();
        let head = BoxHead {
            fc: Linear::he(pooled, config.head_hidden, &mut rng),
            cls: head_rows(config.head_hidden, k + 1, CLS_STD, &mut rng),
            reg: head_rows(config.head_hidden, 4 * k, REG_STD, &mut rng),
        };
        Ok(Detector {
            config,
            stem,
            branches: vec![Branch {
                step: 0,
                classes: classes.to_vec(),
                extractor,
            }],
            rpn,
            head,
            registry: classes.to_vec(),
            seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.registry.len()
    }

    /// Slot of a class id in the head (1-based; 0 is background).
    pub fn slot_of(&self, class_id: u32) -> Option<usize> {
        self.registry.iter().position(|&c| c == class_id).map(|p| p + 1)
    }

    pub fn active_branch(&self) -> usize {
        self.branches.len() - 1
    }

    /// Appends output units for `new_classes`; existing rows are left untouched.
    pub fn extend_head(&mut self, new_classes: &[u32], seed: u64) -> Result<()> {
        let known: HashSet<u32> = self.registry.iter().copied().collect();
        let mut fresh = HashSet::new();
        for &c in new_classes {
            if c == 0 || known.contains(&c) || !fresh.insert(c) {
                return Err(Error::config(format!(
                    "class {c} is already registered or invalid"
                )));
            }
        }
        if new_classes.is_empty() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 + self.registry.len() as u64));
        let hidden = self.config.head_hidden;
        let n = new_classes.len();
        let cls_new: Linear<T> = head_rows(hidden, n, CLS_STD, &mut rng);
        let reg_new: Linear<T> = head_rows(hidden, 4 * n, REG_STD, &mut rng);
        self.head.cls.weight.append_rows(&cls_new.weight)?;
        self.head.cls.bias.append_rows(&cls_new.bias)?;
        self.head.reg.weight.append_rows(&reg_new.weight)?;
        self.head.reg.bias.append_rows(&reg_new.bias)?;
        self.registry.extend_from_slice(new_classes);
        self.branches
            .last_mut()
            .expect("at least one branch")
            .classes
            .extend_from_slice(new_classes);
        Ok(())
    }

    /// Zero-valued copy with identical layout, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Detector {
            config: self.config.clone(),
            stem: self.stem.iter().map(Conv::zeros_like).collect(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    step: b.step,
                    classes: b.classes.clone(),
                    extractor: b.extractor.iter().map(Conv::zeros_like).collect(),
                })
                .collect(),
            rpn: self.rpn.zeros_like(),
            head: self.head.zeros_like(),
            registry: self.registry.clone(),
            seed: self.seed,
        }
    }

    /// Every parameter array with a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Component, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.stem.iter().enumerate() {
            out.push((format!("stem.{i}.weight"), Component::Stem, &c.weight));
            out.push((format!("stem.{i}.bias"), Component::Stem, &c.bias));
        }
        for (b, br) in self.branches.iter().enumerate() {
            for (i, c) in br.extractor.iter().enumerate() {
                out.push((format!("branch.{b}.{i}.weight"), Component::Branch(b), &c.weight));
                out.push((format!("branch.{b}.{i}.bias"), Component::Branch(b), &c.bias));
            }
        }
        let r = &self.rpn;
        out.push(("rpn.objectness.weight".into(), Component::Rpn, &r.objectness.weight));
        out.push(("rpn.objectness.bias".into(), Component::Rpn, &r.objectness.bias));
        out.push(("rpn.deltas.weight".into(), Component::Rpn, &r.deltas.weight));
        out.push(("rpn.deltas.bias".into(), Component::Rpn, &r.deltas.bias));
        let h = &self.head;
        out.push(("head.fc.weight".into(), Component::Head, &h.fc.weight));
        out.push(("head.fc.bias".into(), Component::Head, &h.fc.bias));
        out.push(("head.cls.weight".into(), Component::Head, &h.cls.weight));
        out.push(("head.cls.bias".into(), Component::Head, &h.cls.bias));
        out.push(("head.reg.weight".into(), Component::Head, &h.reg.weight));
        out.push(("head.reg.bias".into(), Component::Head, &h.reg.bias));
        out
    }

    /// Mutable counterpart of [`named_params`](Self::named_params), same order.
    pub fn params_mut(&mut self) -> Vec<(Component, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for c in &mut self.stem {
            out.push((Component::Stem, &mut c.weight));
            out.push((Component::Stem, &mut c.bias));
        }
        for (b, br) in self.branches.iter_mut().enumerate() {
            for c in &mut br.extractor {
                out.push((Component::Branch(b), &mut c.weight));
                out.push((Component::Branch(b), &mut c.bias));
            }
        }
        let r = &mut self.rpn;
        out.push((Component::Rpn, &mut r.objectness.weight));
        out.push((Component::Rpn, &mut r.objectness.bias));
        out.push((Component::Rpn, &mut r.deltas.weight));
        out.push((Component::Rpn, &mut r.deltas.bias));
        let h = &mut self.head;
        out.push((Component::Head, &mut h.fc.weight));
        out.push((Component::Head, &mut h.fc.bias));
        out.push((Component::Head, &mut h.cls.weight));
        out.push((Component::Head, &mut h.cls.bias));
        out.push((Component::Head, &mut h.reg.weight));
        out.push((Component::Head, &mut h.reg.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn component_param_count(&self, component: Component) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, c, _)| *c == component)
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// SHA-256 over the parameters of one component.
    pub fn component_hash(&self, component: Component) -> String {
        let mut h = Sha256::new();
        for (name, c, t) in self.named_params() {
            if c == component {
                h.update(name.as_bytes());
                t.digest_into(&mut h);
            }
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every parameter plus the class registry.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, _, t) in self.named_params() {
            h.update(name.as_bytes());
            t.digest_into(&mut h);
        }
        for c in &self.registry {
            h.update(c.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, _, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        let conv = |c: &Conv<T>| Conv {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            stride: c.stride,
        };
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        Detector {
            config: self.config.clone(),
            stem: self.stem.iter().map(conv).collect(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    step: b.step,
                    classes: b.classes.clone(),
                    extractor: b.extractor.iter().map(conv).collect(),
                })
                .collect(),
            rpn: Rpn {
                objectness: lin(&self.rpn.objectness),
                deltas: lin(&self.rpn.deltas),
            },
            head: BoxHead {
                fc: lin(&self.head.fc),
                cls: lin(&self.head.cls),
                reg: lin(&self.head.reg),
            },
            registry: self.registry.clone(),
            seed: self.seed,
        }
    }

    pub(crate) fn check_image(&self, image: &Grid<T>) -> Result<()> {
        let s = self.config.total_stride();
        if image.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "image has {} channels, detector expects {}",
                image.c, self.config.in_channels
            )));
        }
        if image.h % s != 0 || image.w % s != 0 || image.h == 0 || image.w == 0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by the backbone stride {s}",
                image.h, image.w
            )));
        }
        Ok(())
    }

    /// Full forward pass through the active branch.
    pub fn forward(&self, image: &Grid<T>) -> Result<ForwardOutput<T>> {
        self.check_image(image)?;
        let stem_out = self.stem_features(image);
        self.forward_from_stem(self.active_branch(), &stem_out, image.w, image.h)
    }

    pub(crate) fn forward_from_stem(
        &self,
        branch: usize,
        stem_out: &Grid<T>,
        width: usize,
        height: usize,
    ) -> Result<ForwardOutput<T>> {
        let features = self.extract(branch, stem_out);
        let rpn = self.rpn_forward(&features);
        let proposals = self.proposals(&rpn, &features, width, height);
        let rois: Vec<BoundingBox<T>> = proposals.iter().map(|p| p.bbox).collect();
        let (head, _) = self.head_forward(&features, &rois);
        Ok(ForwardOutput {
            features,
            rpn,
            rois,
            head,
        })
    }

    /// Scored detections from the active branch.
    pub fn predict(&self, image: &Grid<T>, score_thr: T, nms_thr: T) -> Result<Vec<Detection<T>>> {
        let out = self.forward(image)?;
        Ok(self.finalize(self.detections(&out, image.w, image.h, score_thr), nms_thr))
    }

    /// Softmax scoring and per-class box decoding, before NMS.
    pub(crate) fn detections(
        &self,
        out: &ForwardOutput<T>,
        width: usize,
        height: usize,
        score_thr: T,
    ) -> Vec<Detection<T>> {
        let coder = BoxCoder::new(self.config.roi.box_weights);
        let k = self.num_classes();
        let (w, h) = (T::of_usize(width), T::of_usize(height));
        let min_side = T::of(1e-2);
        let mut dets = Vec::new();
        for (r, roi) in out.rois.iter().enumerate() {
            let probs = pass::softmax(out.head.logits_row(r));
            let deltas = out.head.deltas_row(r);
            for slot in 1..=k {
                let p = probs[slot];
                if !(p > score_thr) {
                    continue;
                }
                let d = [
                    deltas[(slot - 1) * 4],
                    deltas[(slot - 1) * 4 + 1],
                    deltas[(slot - 1) * 4 + 2],
                    deltas[(slot - 1) * 4 + 3],
                ];
                let bbox = coder.decode_unchecked(roi, &d).clip(w, h);
                if bbox.width() < min_side || bbox.height() < min_side {
                    continue;
                }
                dets.push(Detection {
                    bbox,
                    class_id: self.registry[slot - 1],
                    score: p,
                });
            }
        }
        dets
    }

    /// Per-class NMS, descending score order, capped per image.
    pub(crate) fn finalize(&self, dets: Vec<Detection<T>>, nms_thr: T) -> Vec<Detection<T>> {
        let mut kept = nms(&dets, nms_thr);
        kept.truncate(self.config.detections_per_image);
        kept
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub features: FeatureMap<T>,
    pub rpn: RpnOutput<T>,
    pub rois: Vec<BoundingBox<T>>,
    pub head: HeadOutput<T>,
}
