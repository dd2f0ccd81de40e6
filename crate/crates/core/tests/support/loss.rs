//! Scalar reference implementations of the distillation losses.

use incdet::detector::{HeadOutput, RpnOutput};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn rpn(logits: Vec<f64>, deltas: Vec<f64>) -> RpnOutput<f64> {
    RpnOutput { scores: logits.iter().map(|&l| sigmoid(l)).collect(), logits, deltas }
}

/// Direct sum over the teacher's slots, mean over rows and teacher logit width.
pub fn box_oracle(s: &HeadOutput<f64>, t: &HeadOutput<f64>) -> f64 {
    let m = t.logits.len() / t.rows;
    let sm = s.logits.len() / s.rows;
    let mut acc = 0.0;
    for r in 0..s.rows {
        for c in 0..m {
            acc += (s.logits[r * sm + c] - t.logits[r * m + c]).powi(2);
        }
        for j in 0..4 * (m - 1) {
            acc += (s.deltas[r * 4 * (sm - 1) + j] - t.deltas[r * 4 * (m - 1) + j]).powi(2);
        }
    }
    acc / (s.rows * m) as f64
}

pub fn rpn_oracle(s: &RpnOutput<f64>, t: &RpnOutput<f64>, tau: f64, student_leads: bool) -> f64 {
    let n = s.scores.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = if student_leads { (s.scores[i], t.scores[i]) } else { (t.scores[i], s.scores[i]) };
        if a >= b {
            acc += (s.scores[i] - t.scores[i]).abs();
        }
        if a >= b + tau {
            acc += (0..4).map(|j| (s.deltas[4 * i + j] - t.deltas[4 * i + j]).abs()).sum::<f64>();
        }
    }
    acc / n as f64
}

/// One-sided L1: only cells where the teacher exceeds the student count.
pub fn feature_oracle(s: &[f64], t: &[f64]) -> f64 {
    s.iter().zip(t).filter(|(a, b)| b > a).map(|(a, b)| b - a).sum::<f64>() / s.len() as f64
}
