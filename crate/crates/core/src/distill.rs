//! Knowledge-distillation losses, method totals, teachers and the shared
//! backbone forward used by Dynamic Y-KD.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{BoxHead, Detector, HeadOutput, HeadTrace, LossBreakdown, Proposal, Rpn, RpnOutput};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Grid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Finetune,
    Ilod,
    Filod,
    #[serde(rename = "dynykd")]
    DynYkd,
    Joint,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Finetune,
        Method::Ilod,
        Method::Filod,
        Method::DynYkd,
        Method::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Ilod => "ilod",
            Method::Filod => "filod",
            Method::DynYkd => "dynykd",
            Method::Joint => "joint",
        }
    }

    /// Display label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Finetune => "Fine-tuning",
            Method::Ilod => "ILOD",
            Method::Filod => "Faster-ILOD",
            Method::DynYkd => "Dynamic Y-KD",
            Method::Joint => "Joint",
        }
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, Method::Ilod | Method::Filod | Method::DynYkd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

/// Which side must dominate for the RPN distillation indicators to fire.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpnIndicator {
    /// `1{s_t >= s_prev}` and `1{s_t >= s_prev + tau}`.
    #[default]
    StudentDominant,
    /// `1{s_prev >= s_t}` and `1{s_prev >= s_t + tau}`.
    TeacherDominant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillationConfig {
    pub lambda_box: f64,
    pub lambda_feat: f64,
    pub lambda_rpn: f64,
    pub tau: f64,
    /// Number of distillation RoIs `N`.
    pub n_rois: usize,
    pub rpn_indicator: RpnIndicator,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig {
            lambda_box: 1.0,
            lambda_feat: 1.0,
            lambda_rpn: 1.0,
            tau: 0.1,
            n_rois: 64,
            rpn_indicator: RpnIndicator::StudentDominant,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_box, self.lambda_feat, self.lambda_rpn, self.tau];
        if l.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("distillation weights and tau must be finite and non-negative"));
        }
        if self.n_rois == 0 {
            return Err(Error::config("n_rois must be positive"));
        }
        Ok(())
    }

    /// `(lambda_box, lambda_feat, lambda_rpn)` after the method's forced zeros.
    pub fn effective_weights(&self, method: Method) -> (f64, f64, f64) {
        match method {
            Method::Finetune | Method::Joint => (0.0, 0.0, 0.0),
            Method::Ilod => (self.lambda_box, 0.0, 0.0),
            Method::Filod => (self.lambda_box, self.lambda_feat, self.lambda_rpn),
            Method::DynYkd => (self.lambda_box, 0.0, self.lambda_rpn),
        }
    }
}

/// Unweighted distillation terms, present where computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KdTerms {
    pub box_distill: Option<f64>,
    pub feat_distill: Option<f64>,
    pub rpn_distill: Option<f64>,
}

/// Method total from the supervised breakdown and the distillation terms.
pub fn total_loss(method: Method, supervised: &LossBreakdown, kd: &KdTerms, cfg: &DistillationConfig) -> Result<f64> {
    let need = |t: Option<f64>, name: &str| {
        t.ok_or_else(|| Error::config(format!("method {method} requires the {name} distillation term")))
    };
    let base = supervised.supervised();
    let (l1, l2, l3) = cfg.effective_weights(method);
    Ok(match method {
        Method::Finetune | Method::Joint => base,
        Method::Ilod => base + l1 * need(kd.box_distill, "box")?,
        Method::Filod => {
            base + l1 * need(kd.box_distill, "box")?
                + l2 * need(kd.feat_distill, "feature")?
                + l3 * need(kd.rpn_distill, "RPN")?
        }
        Method::DynYkd => base + l1 * need(kd.box_distill, "box")? + l3 * need(kd.rpn_distill, "RPN")?,
    })
}

/// Gradients of a head distillation loss w.r.t. both heads' outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadDistillGrad<T> {
    pub student_logits: Vec<T>,
    pub student_deltas: Vec<T>,
    pub teacher_logits: Vec<T>,
    pub teacher_deltas: Vec<T>,
}

/// `(1 / (N M)) * sum((y_s - y_t)^2 + (r_s - r_t)^2)` over the `N` RoIs and
/// the teacher's slots; `M` is the teacher's logit width.
pub fn box_head_distill<T: Scalar>(student: &HeadOutput<T>, teacher: &HeadOutput<T>) -> Result<T> {
    box_head_distill_grad(student, teacher).map(|(v, _)| v)
}

pub fn box_head_distill_grad<T: Scalar>(
    student: &HeadOutput<T>,
    teacher: &HeadOutput<T>,
) -> Result<(T, HeadDistillGrad<T>)> {
    if student.rows != teacher.rows {
        return Err(Error::Wiring(format!(
            "student scored {} RoIs, teacher {}",
            student.rows, teacher.rows
        )));
    }
    let n = student.rows;
    let mut g = HeadDistillGrad {
        student_logits: vec![T::zero(); student.logits.len()],
        student_deltas: vec![T::zero(); student.deltas.len()],
        teacher_logits: vec![T::zero(); teacher.logits.len()],
        teacher_deltas: vec![T::zero(); teacher.deltas.len()],
    };
    if n == 0 {
        return Ok((T::zero(), g));
    }
    let (m, tr) = (teacher.logit_width(), teacher.delta_width());
    let (sm, sr) = (student.logit_width(), student.delta_width());
    if m > sm || tr > sr || m == 0 {
        return Err(Error::Wiring(format!(
            "teacher head ({m} logits, {tr} deltas) does not fit in the student ({sm}, {sr})"
        )));
    }
    let scale = T::one() / (T::of_usize(n) * T::of_usize(m));
    let two = T::of(2.0) * scale;
    let mut sum = T::zero();
    for r in 0..n {
        for s in 0..m {
            let d = student.logits[r * sm + s] - teacher.logits[r * m + s];
            sum += d * d;
            g.student_logits[r * sm + s] = two * d;
            g.teacher_logits[r * m + s] = -two * d;
        }
        for j in 0..tr {
            let d = student.deltas[r * sr + j] - teacher.deltas[r * tr + j];
            sum += d * d;
            g.student_deltas[r * sr + j] = two * d;
            g.teacher_deltas[r * tr + j] = -two * d;
        }
    }
    Ok((sum * scale, g))
}

/// `(1 / (H W D)) * sum |t_i - s_i|` over positions where the teacher
/// activation exceeds the student's.
pub fn feature_distill<T: Scalar>(student: &FeatureMap<T>, teacher: &FeatureMap<T>) -> Result<T> {
    feature_distill_grad(student, teacher).map(|(v, _, _)| v)
}

/// Value plus gradients w.r.t. the student and teacher maps.
pub fn feature_distill_grad<T: Scalar>(
    student: &FeatureMap<T>,
    teacher: &FeatureMap<T>,
) -> Result<(T, Grid<T>, Grid<T>)> {
    if !student.same_shape(teacher) {
        return Err(Error::Wiring(format!(
            "feature maps differ: {}x{}x{} vs {}x{}x{}",
            student.h, student.w, student.c, teacher.h, teacher.w, teacher.c
        )));
    }
    let n = student.data.len();
    let mut ds = Grid::zeros(student.h, student.w, student.c);
    let mut dt = Grid::zeros(student.h, student.w, student.c);
    if n == 0 {
        return Ok((T::zero(), ds, dt));
    }
    let inv = T::one() / T::of_usize(n);
    let mut sum = T::zero();
    for i in 0..n {
        let (s, t) = (student.data[i], teacher.data[i]);
        if t > s {
            sum += t - s;
            ds.data[i] = -inv;
            dt.data[i] = inv;
        }
    }
    Ok((sum * inv, ds, dt))
}

/// Gradients of the RPN distillation loss w.r.t. both sides' logits and deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnDistillGrad<T> {
    pub student_logits: Vec<T>,
    pub student_deltas: Vec<T>,
    pub teacher_logits: Vec<T>,
    pub teacher_deltas: Vec<T>,
}

/// `(1/N) * sum[ 1{s_t >= s_prev} |s_t - s_prev| + 1{s_t >= s_prev + tau} |w_t - w_prev|_1 ]`
/// (indicator sides swapped under [`RpnIndicator::TeacherDominant`]).
pub fn rpn_distill<T: Scalar>(
    student: &RpnOutput<T>,
    teacher: &RpnOutput<T>,
    tau: f64,
    indicator: RpnIndicator,
) -> Result<T> {
    rpn_distill_grad(student, teacher, tau, indicator).map(|(v, _)| v)
}

pub fn rpn_distill_grad<T: Scalar>(
    student: &RpnOutput<T>,
    teacher: &RpnOutput<T>,
    tau: f64,
    indicator: RpnIndicator,
) -> Result<(T, RpnDistillGrad<T>)> {
    let n = student.num_anchors();
    if n != teacher.num_anchors() || student.deltas.len() != teacher.deltas.len() {
        return Err(Error::Wiring(format!(
            "student has {n} anchors, teacher {}",
            teacher.num_anchors()
        )));
    }
    let mut g = RpnDistillGrad {
        student_logits: vec![T::zero(); n],
        student_deltas: vec![T::zero(); 4 * n],
        teacher_logits: vec![T::zero(); n],
        teacher_deltas: vec![T::zero(); 4 * n],
    };
    if n == 0 {
        return Ok((T::zero(), g));
    }
    let tau = T::of(tau);
    let inv = T::one() / T::of_usize(n);
    let mut sum = T::zero();
    for i in 0..n {
        let (s, t) = (student.scores[i], teacher.scores[i]);
        let (lead, lag) = match indicator {
            RpnIndicator::StudentDominant => (s, t),
            RpnIndicator::TeacherDominant => (t, s),
        };
        if lead >= lag {
            sum += (s - t).abs();
            // d|s - t|/ds through the sigmoid
            let sign = if s >= t { T::one() } else { -T::one() };
            g.student_logits[i] = sign * inv * s * (T::one() - s);
            g.teacher_logits[i] = -sign * inv * t * (T::one() - t);
        }
        if lead >= lag + tau {
            for j in 0..4 {
                let d = student.deltas[4 * i + j] - teacher.deltas[4 * i + j];
                sum += d.abs();
                let sign = if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                g.student_deltas[4 * i + j] = sign * inv;
                g.teacher_deltas[4 * i + j] = -sign * inv;
            }
        }
    }
    Ok((sum * inv, g))
}

/// Frozen parts of the previous model.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherKind<T> {
    /// Whole previous detector (ILOD, Faster-ILOD).
    Full(Detector<T>),
    /// Previous RPN and box head, fed with the student's features (Dynamic Y-KD).
    Head { rpn: Rpn<T>, head: BoxHead<T> },
}

/// A frozen teacher that counts its forward passes.
#[derive(Debug)]
pub struct TeacherBundle<T> {
    kind: TeacherKind<T>,
    pool_size: usize,
    stride: usize,
    forwards: AtomicUsize,
}

impl<T: Scalar> Clone for TeacherBundle<T> {
    fn clone(&self) -> Self {
        TeacherBundle {
            kind: self.kind.clone(),
            pool_size: self.pool_size,
            stride: self.stride,
            forwards: AtomicUsize::new(self.forward_count()),
        }
    }
}

/// Teacher outputs on the distillation RoIs and their anchors.
#[derive(Clone, Debug)]
pub struct TeacherOutputs<T> {
    pub rpn: RpnOutput<T>,
    pub head: HeadOutput<T>,
    /// Teacher feature map (full teachers only).
    pub features: Option<FeatureMap<T>>,
    /// Head activations (head-only teachers), for backpropagating into shared features.
    pub trace: Option<HeadTrace<T>>,
}

impl<T: Scalar> TeacherBundle<T> {
    pub fn full(model: &Detector<T>) -> Self {
        TeacherBundle {
            kind: TeacherKind::Full(model.clone()),
            pool_size: model.config.pool_size,
            stride: model.config.total_stride(),
            forwards: AtomicUsize::new(0),
        }
    }

    pub fn head_only(model: &Detector<T>) -> Self {
        TeacherBundle {
            kind: TeacherKind::Head {
                rpn: model.rpn.clone(),
                head: model.head.clone(),
            },
            pool_size: model.config.pool_size,
            stride: model.config.total_stride(),
            forwards: AtomicUsize::new(0),
        }
    }

    pub fn kind(&self) -> &TeacherKind<T> {
        &self.kind
    }

    pub fn is_head_only(&self) -> bool {
        matches!(self.kind, TeacherKind::Head { .. })
    }

    pub fn num_classes(&self) -> usize {
        match &self.kind {
            TeacherKind::Full(m) => m.num_classes(),
            TeacherKind::Head { head, .. } => head.num_classes(),
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.kind {
            TeacherKind::Full(m) => m.param_count(),
            TeacherKind::Head { rpn, head } => rpn.param_count() + head.param_count(),
        }
    }

    pub fn param_hash(&self) -> String {
        match &self.kind {
            TeacherKind::Full(m) => m.param_hash(),
            TeacherKind::Head { rpn, head } => {
                let mut h = Sha256::new();
                for l in [&rpn.objectness, &rpn.deltas, &head.fc, &head.cls, &head.reg] {
                    l.weight.digest_into(&mut h);
                    l.bias.digest_into(&mut h);
                }
                hex::encode(h.finalize())
            }
        }
    }

    /// Number of forward evaluations since the snapshot.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Teacher outputs at `rois` and `anchors`.
    ///
    /// Full teachers run their own backbone on `image`; head-only teachers
    /// score `student_features` (and keep activations when `trace` is set).
    pub fn outputs(
        &self,
        image: &Grid<T>,
        student_features: &FeatureMap<T>,
        rois: &[BoundingBox<T>],
        anchors: &[usize],
        trace: bool,
    ) -> Result<TeacherOutputs<T>> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        match &self.kind {
            TeacherKind::Full(m) => {
                m.check_image(image)?;
                let s = m.stem_features(image);
                let f = m.extract(m.active_branch(), &s);
                let rpn = m.rpn_forward(&f).select(anchors);
                let (head, _) = m.head_forward(&f, rois);
                Ok(TeacherOutputs {
                    rpn,
                    head,
                    features: Some(f),
                    trace: None,
                })
            }
            TeacherKind::Head { rpn, head } => {
                let r = rpn.forward(student_features).select(anchors);
                let (h, t) = head.forward(student_features, rois, self.pool_size, self.stride);
                Ok(TeacherOutputs {
                    rpn: r,
                    head: h,
                    features: None,
                    trace: trace.then_some(t),
                })
            }
        }
    }
}

/// Student and teacher outputs computed from one shared feature map.
#[derive(Clone, Debug)]
pub struct YkdForward<T> {
    pub features: FeatureMap<T>,
    pub rois: Vec<Proposal<T>>,
    pub student_rpn: RpnOutput<T>,
    pub student_head: HeadOutput<T>,
    pub teacher_rpn: RpnOutput<T>,
    pub teacher_head: HeadOutput<T>,
}

/// `X = F_t(B(image))`; both heads score the student's top-`n_rois`
/// proposals on `X`.
pub fn ykd_forward<T: Scalar>(
    model: &Detector<T>,
    teacher: &TeacherBundle<T>,
    image: &Grid<T>,
    n_rois: usize,
) -> Result<YkdForward<T>> {
    if !teacher.is_head_only() {
        return Err(Error::Wiring("shared-backbone forward needs a head-only teacher".into()));
    }
    let out = model.forward(image)?;
    let rpn_full = out.rpn;
    let features = out.features;
    let rois: Vec<Proposal<T>> = model
        .proposals(&rpn_full, &features, image.w, image.h)
        .into_iter()
        .take(n_rois)
        .collect();
    let boxes: Vec<_> = rois.iter().map(|p| p.bbox).collect();
    let anchors: Vec<_> = rois.iter().map(|p| p.anchor).collect();
    let (student_head, _) = model.head_forward(&features, &boxes);
    let t = teacher.outputs(image, &features, &boxes, &anchors, false)?;
    Ok(YkdForward {
        student_rpn: rpn_full.select(&anchors),
        student_head,
        teacher_rpn: t.rpn,
        teacher_head: t.head,
        features,
        rois,
    })
}
