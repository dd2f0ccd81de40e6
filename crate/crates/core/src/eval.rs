//! Average precision, mAP, class-group reporting and joint ratios.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::branch::merged_inference;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::scalar::Scalar;
use crate::tensor::Grid;

/// A detection tagged with its image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub image_id: u64,
    pub class_id: u32,
    pub bbox: BoundingBox<f64>,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: u32,
    pub bbox: BoundingBox<f64>,
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Descending score; ties by image id, then box coordinates.
fn rank(a: &EvalDetection, b: &EvalDetection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then_with(|| a.bbox.total_cmp(&b.bbox))
}

/// True/false positive flags in ranked order.
fn match_detections(dets: &[EvalDetection], gts: &[GroundTruth], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<&EvalDetection> = dets.iter().collect();
    order.sort_by(|a, b| rank(a, b));
    let mut by_image: BTreeMap<u64, Vec<(BoundingBox<f64>, bool)>> = BTreeMap::new();
    for g in gts {
        by_image.entry(g.image_id).or_default().push((g.bbox, false));
    }
    order
        .into_iter()
        .map(|d| {
            let Some(cands) = by_image.get_mut(&d.image_id) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, used)) in cands.iter().enumerate() {
                if *used {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= iou_thr => {
                    cands[j].1 = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Area under the precision envelope of the ranked PR curve.
fn area_under_envelope(tp: &[bool], n_gt: usize) -> f64 {
    let n = tp.len();
    let mut prec = Vec::with_capacity(n);
    let mut rec = Vec::with_capacity(n);
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for i in (0..n.saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..n {
        if rec[i] > prev {
            ap += (rec[i] - prev) * prec[i];
            prev = rec[i];
        }
    }
    ap
}

/// Single-class AP with greedy matching and all-point interpolation.
///
/// `None` when there are neither ground truths nor detections; `0` when
/// detections exist without ground truths. Class ids are ignored.
pub fn average_precision(dets: &[EvalDetection], gts: &[GroundTruth], iou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    Some(area_under_envelope(&match_detections(dets, gts, iou_thr), gts.len()))
}

/// Per-class mean-over-thresholds AP.
pub fn per_class_ap(
    preds: &[EvalDetection],
    gts: &[GroundTruth],
    classes: &[u32],
    thresholds: &[f64],
) -> BTreeMap<u32, Option<f64>> {
    classes
        .iter()
        .map(|&c| {
            let d: Vec<EvalDetection> = preds.iter().filter(|p| p.class_id == c).copied().collect();
            let g: Vec<GroundTruth> = gts.iter().filter(|p| p.class_id == c).copied().collect();
            let aps: Option<Vec<f64>> = thresholds.iter().map(|&t| average_precision(&d, &g, t)).collect();
            (c, aps.map(|v| v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect()
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean over classes (those with a defined AP) of mean-over-thresholds AP.
pub fn map_at(preds: &[EvalDetection], gts: &[GroundTruth], classes: &[u32], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::config("at least one IoU threshold is required"));
    }
    Ok(mean_defined(per_class_ap(preds, gts, classes, thresholds).into_values()).unwrap_or(0.0))
}

/// Class-group means. Classes without a defined AP are skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    pub base: Option<f64>,
    pub intermediate: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
}

/// Base = first step, new = last step (when there is more than one),
/// intermediate = everything in between, all = every class.
pub fn group_report(per_class: &BTreeMap<u32, Option<f64>>, steps: &[Vec<u32>]) -> GroupMeans {
    let pick = |ids: &[u32]| {
        mean_defined(ids.iter().map(|c| {
            let v = per_class.get(c).copied().flatten();
            if v.is_none() {
                log::warn!("class {c} has no test instances; excluded from group means");
            }
            v
        }))
    };
    let t = steps.len();
    let all: Vec<u32> = steps.concat();
    GroupMeans {
        base: steps.first().and_then(|s| pick(s)),
        intermediate: if t > 2 { pick(&steps[1..t - 1].concat()) } else { None },
        new: if t > 1 { pick(&steps[t - 1]) } else { None },
        all: pick(&all),
    }
}

/// `incremental / joint`.
pub fn joint_ratio(incremental: f64, joint: f64) -> Result<f64> {
    if joint == 0.0 {
        return Err(Error::UndefinedRatio("joint mAP is zero".into()));
    }
    Ok(incremental / joint)
}

/// Column labels: `1-b`, the intermediate span, the final step span, `1-K`.
pub fn group_labels(steps: &[Vec<u32>]) -> GroupLabels {
    let span = |ids: &[u32]| match (ids.first(), ids.last()) {
        (Some(a), Some(b)) if a == b => a.to_string(),
        (Some(a), Some(b)) => format!("{a}-{b}"),
        _ => String::new(),
    };
    let t = steps.len();
    let all = steps.concat();
    GroupLabels {
        base: span(&steps[0]),
        intermediate: (t > 2).then(|| span(&steps[1..t - 1].concat())),
        new: (t > 1).then(|| span(&steps[t - 1])),
        all: span(&all),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLabels {
    pub base: String,
    pub intermediate: Option<String>,
    pub new: Option<String>,
    pub all: String,
}

/// Which mAP a report headlines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Map50,
    Map50To95,
}

impl Metric {
    pub fn thresholds(self) -> Vec<f64> {
        match self {
            Metric::Map50 => vec![0.5],
            Metric::Map50To95 => coco_thresholds(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Map50 => "mAP@0.5",
            Metric::Map50To95 => "mAP@[0.5:0.95]",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub name: String,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub per_class: Vec<ClassAp>,
    pub map50: f64,
    pub map50_95: f64,
    /// Group means of the headline metric.
    pub groups: GroupMeans,
    pub labels: GroupLabels,
    pub joint_ratio: Option<f64>,
}

impl EvalReport {
    pub fn build(
        preds: &[EvalDetection],
        gts: &[GroundTruth],
        steps: &[Vec<u32>],
        class_names: &[String],
        metric: Metric,
    ) -> Self {
        let classes: Vec<u32> = steps.concat();
        let ap50 = per_class_ap(preds, gts, &classes, &[0.5]);
        let ap5095 = per_class_ap(preds, gts, &classes, &coco_thresholds());
        let per_class = classes
            .iter()
            .map(|&c| ClassAp {
                class_id: c,
                name: class_names
                    .get(c as usize - 1)
                    .cloned()
                    .unwrap_or_else(|| c.to_string()),
                ap50: ap50[&c],
                ap50_95: ap5095[&c],
            })
            .collect();
        let headline = match metric {
            Metric::Map50 => &ap50,
            Metric::Map50To95 => &ap5095,
        };
        EvalReport {
            metric,
            per_class,
            map50: mean_defined(ap50.values().copied()).unwrap_or(0.0),
            map50_95: mean_defined(ap5095.values().copied()).unwrap_or(0.0),
            groups: group_report(headline, steps),
            labels: group_labels(steps),
            joint_ratio: None,
        }
    }

    pub fn headline(&self) -> f64 {
        match self.metric {
            Metric::Map50 => self.map50,
            Metric::Map50To95 => self.map50_95,
        }
    }

    pub fn to_markdown(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "## {title} ({})\n", self.metric.label());
        let _ = writeln!(s, "{}", markdown_table(&self.labels, &[(title.to_string(), self.groups, self.joint_ratio)]));
        let _ = writeln!(s, "| class | name | AP@0.5 | AP@[0.5:0.95] |");
        let _ = writeln!(s, "|---|---|---|---|");
        for c in &self.per_class {
            let _ = writeln!(s, "| {} | {} | {} | {} |", c.class_id, c.name, pct(c.ap50), pct(c.ap50_95));
        }
        s
    }
}

/// A value in `[0, 1]` as a one-decimal percentage, `-` when missing.
pub fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Rows are methods, columns the class groups (and the joint ratio when any row has one).
pub fn markdown_table(labels: &GroupLabels, rows: &[(String, GroupMeans, Option<f64>)]) -> String {
    let mut head = vec!["method".to_string(), labels.base.clone()];
    if let Some(l) = &labels.intermediate {
        head.push(l.clone());
    }
    if let Some(l) = &labels.new {
        head.push(l.clone());
    }
    head.push(labels.all.clone());
    let with_ratio = rows.iter().any(|r| r.2.is_some());
    if with_ratio {
        head.push("joint ratio".into());
    }
    let mut s = format!("| {} |\n|{}\n", head.join(" | "), "---|".repeat(head.len()));
    for (name, g, ratio) in rows {
        let mut cells = vec![name.clone(), pct(g.base)];
        if labels.intermediate.is_some() {
            cells.push(pct(g.intermediate));
        }
        if labels.new.is_some() {
            cells.push(pct(g.new));
        }
        cells.push(pct(g.all));
        if with_ratio {
            cells.push(pct(*ratio));
        }
        let _ = writeln!(s, "| {} |", cells.join(" | "));
    }
    s
}

/// Runs the detector over `images` (merged over branches) and collects tagged detections.
pub fn collect_predictions<T: Scalar>(
    model: &Detector<T>,
    images: &[(u64, Grid<T>)],
    score_thr: f64,
    nms_thr: f64,
) -> Result<Vec<EvalDetection>> {
    let mut out = Vec::new();
    for (id, img) in images {
        for d in merged_inference(model, img, T::of(score_thr), T::of(nms_thr))? {
            out.push(EvalDetection {
                image_id: *id,
                class_id: d.class_id,
                bbox: d.bbox.cast(),
                score: d.score.f64(),
            });
        }
    }
    Ok(out)
}
