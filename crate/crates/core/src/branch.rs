//! Growing architecture: one extractor branch per step over a shared stem,
//! class-routed prediction merging, and parameter/compute accounting.

use serde::{Deserialize, Serialize};

use crate::detector::{Branch, Component, Detector};
use crate::error::Result;
use crate::geometry::Detection;
use crate::scalar::Scalar;
use crate::tensor::Grid;

/// Appends a branch for `step`, initialized from the current last branch, and
/// extends the head with `new_classes` (which the new branch owns).
pub fn grow_branch<T: Scalar>(model: &mut Detector<T>, step: usize, new_classes: &[u32], seed: u64) -> Result<()> {
    let last = model.branches.last().expect("detector has a branch");
    let branch = Branch {
        step,
        classes: Vec::new(),
        extractor: last.extractor.clone(),
    };
    model.branches.push(branch);
    model.extend_head(new_classes, seed)
}

/// Runs every branch over the shared stem output, keeps each branch's
/// detections of its own classes, then applies per-class NMS to the union.
pub fn merged_inference<T: Scalar>(
    model: &Detector<T>,
    image: &Grid<T>,
    score_thr: T,
    nms_thr: T,
) -> Result<Vec<Detection<T>>> {
    model.check_image(image)?;
    let stem = model.stem_features(image);
    let mut all = Vec::new();
    for (i, br) in model.branches.iter().enumerate() {
        let out = model.forward_from_stem(i, &stem, image.w, image.h)?;
        all.extend(
            model
                .detections(&out, image.w, image.h, score_thr)
                .into_iter()
                .filter(|d| br.classes.contains(&d.class_id)),
        );
    }
    Ok(model.finalize(all, nms_thr))
}

/// Exact parameter counts and a multiply-accumulate estimate of one inference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub params_total: usize,
    pub params_stem: usize,
    pub params_per_branch: Vec<usize>,
    pub params_rpn: usize,
    pub params_head: usize,
    pub stem_macs: u64,
    /// Extractor + RPN + box head on `k` proposals, per branch.
    pub branch_macs: u64,
    pub estimated_inference_macs: u64,
}

pub fn resource_report<T: Scalar>(model: &Detector<T>) -> ResourceReport {
    let cfg = &model.config;
    let mut h = cfg.image_size as u64;
    let mut c = cfg.in_channels as u64;
    let mut conv_macs = |specs: &[crate::detector::ConvSpec]| {
        let mut total = 0u64;
        for s in specs {
            let stride = s.stride as u64;
            h = (h - 1) / stride + 1;
            total += h * h * s.channels as u64 * 9 * c;
            c = s.channels as u64;
        }
        total
    };
    let stem_macs = conv_macs(&cfg.stem);
    let extractor_macs = conv_macs(&cfg.extractor);
    let d = c;
    let a = cfg.anchors_per_location() as u64;
    let rpn_macs = h * h * d * 5 * a;
    let k = cfg.rpn.post_nms_top_n as u64;
    let bins = (cfg.pool_size * cfg.pool_size) as u64;
    let hidden = cfg.head_hidden as u64;
    let classes = model.num_classes() as u64;
    let head_macs = k * (4 * bins * d + bins * d * hidden + hidden * (classes + 1) + hidden * 4 * classes);
    let branch_macs = extractor_macs + rpn_macs + head_macs;
    let nb = model.branches.len() as u64;
    ResourceReport {
        params_total: model.param_count(),
        params_stem: model.component_param_count(Component::Stem),
        params_per_branch: (0..model.branches.len())
            .map(|i| model.component_param_count(Component::Branch(i)))
            .collect(),
        params_rpn: model.component_param_count(Component::Rpn),
        params_head: model.component_param_count(Component::Head),
        stem_macs,
        branch_macs,
        estimated_inference_macs: stem_macs + nb * branch_macs,
    }
}
