//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

pub mod arch;
pub mod grad;
pub mod loss;

use incdet::eval::{EvalDetection, GroundTruth};
use incdet::geometry::BoundingBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// IoU by counting cells of a `1/res` grid covered by each box. Exact for
/// boxes whose corners lie on that grid.
pub fn raster_iou(a: [f64; 4], b: [f64; 4], res: f64) -> f64 {
    let cells = |v: f64| (v * res).round() as i64;
    let (ax1, ay1, ax2, ay2) = (cells(a[0]), cells(a[1]), cells(a[2]), cells(a[3]));
    let (bx1, by1, bx2, by2) = (cells(b[0]), cells(b[1]), cells(b[2]), cells(b[3]));
    let (lo_x, hi_x) = (ax1.min(bx1), ax2.max(bx2));
    let (lo_y, hi_y) = (ay1.min(by1), ay2.max(by2));
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let in_a = x >= ax1 && x < ax2 && y >= ay1 && y < ay2;
            let in_b = x >= bx1 && x < bx2 && y >= by1 && y < by2;
            inter += (in_a && in_b) as u64;
            union += (in_a || in_b) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Plain closed-form IoU on arrays.
pub fn iou_ref(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy NMS by repeated scans: take the best remaining, drop everything
/// overlapping it above the threshold.
pub fn greedy_nms_ref(boxes: &[[f64; 4]], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let best = (0..boxes.len())
            .filter(|&i| alive[i])
            .max_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(j.cmp(&i)));
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && iou_ref(boxes[b], boxes[i]) > thr {
                alive[i] = false;
            }
        }
    }
    kept
}

fn lex(a: [f64; 4], b: [f64; 4]) -> std::cmp::Ordering {
    for k in 0..4 {
        let o = a[k].total_cmp(&b[k]);
        if o.is_ne() {
            return o;
        }
    }
    std::cmp::Ordering::Equal
}

/// Single-class AP: rank, match each detection to the best-overlapping
/// still-free ground truth of its image, then sum the interpolated precision
/// at every true positive (each adds `1 / n_gt` recall).
pub fn brute_ap(dets: &[EvalDetection], gts: &[GroundTruth], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    let mut d: Vec<&EvalDetection> = dets.iter().collect();
    d.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_id.cmp(&b.image_id))
            .then(lex(a.bbox.to_array(), b.bbox.to_array()))
    });
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::new();
    for det in &d {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.image_id != det.image_id {
                continue;
            }
            let v = iou_ref(det.bbox.to_array(), g.bbox.to_array());
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v >= thr => {
                used[j] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    let precision_at = |k: usize| tp[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64;
    let mut ap = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            let env = (k..tp.len()).map(precision_at).fold(0.0, f64::max);
            ap += env / gts.len() as f64;
        }
    }
    Some(ap)
}

/// A seeded micro evaluation case: up to 3 images, 2 classes, 6 detections.
pub fn micro_eval_case(seed: u64) -> (Vec<EvalDetection>, Vec<GroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.random_range(1..=3u64);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0..8) as f64;
        let y = rng.random_range(0..8) as f64;
        let w = rng.random_range(2..6) as f64;
        let h = rng.random_range(2..6) as f64;
        BoundingBox::new(x, y, x + w, y + h)
    };
    let mut gts = Vec::new();
    for im in 0..images {
        for _ in 0..rng.random_range(0..=2) {
            gts.push(GroundTruth {
                image_id: im,
                class_id: rng.random_range(1..=2),
                bbox: rand_box(&mut rng),
            });
        }
    }
    let mut dets = Vec::new();
    for _ in 0..rng.random_range(0..=6) {
        let image_id = rng.random_range(0..images);
        // Jittered copy of a ground truth half of the time.
        let bbox = match gts.iter().filter(|g| g.image_id == image_id).nth(0) {
            Some(g) if rng.random_bool(0.5) => {
                let j = |v: f64, r: &mut ChaCha8Rng| v + r.random_range(-1..=1) as f64 * 0.5;
                BoundingBox::new(j(g.bbox.x1, &mut rng), j(g.bbox.y1, &mut rng), g.bbox.x2 + 1.0, g.bbox.y2)
            }
            _ => rand_box(&mut rng),
        };
        dets.push(EvalDetection {
            image_id,
            class_id: rng.random_range(1..=2),
            bbox,
            // Coarse scores so that ties occur.
            score: rng.random_range(1..=4) as f64 / 4.0,
        });
    }
    (dets, gts)
}
