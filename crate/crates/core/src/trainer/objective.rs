//! Per-image training objective: forward, supervised and distillation losses,
//! and the backward pass into every trainable parameter group.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    sample_plan, supervised_loss, Component, Detector, LossBreakdown, SamplePlan, TrainTargets,
};
use crate::detector::conv_chain_backward;
use crate::distill::{
    box_head_distill_grad, feature_distill_grad, rpn_distill_grad, DistillationConfig, Method, TeacherBundle,
    TeacherKind,
};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Grid;

/// A training image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub image_id: u64,
    pub image: Grid<T>,
    pub targets: TrainTargets<T>,
}

/// Multipliers applied to each loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub box_cls: f64,
    pub box_reg: f64,
    pub box_distill: f64,
    pub feat_distill: f64,
    pub rpn_distill: f64,
}

impl TermWeights {
    pub fn for_method(method: Method, cfg: &DistillationConfig) -> Self {
        let (l1, l2, l3) = cfg.effective_weights(method);
        TermWeights {
            rpn_cls: 1.0,
            rpn_reg: 1.0,
            box_cls: 1.0,
            box_reg: 1.0,
            box_distill: l1,
            feat_distill: l2,
            rpn_distill: l3,
        }
    }

    /// Every weight zero except the named term.
    pub fn only(term: &str) -> Self {
        let mut w = TermWeights {
            rpn_cls: 0.0,
            rpn_reg: 0.0,
            box_cls: 0.0,
            box_reg: 0.0,
            box_distill: 0.0,
            feat_distill: 0.0,
            rpn_distill: 0.0,
        };
        match term {
            "rpn_cls" => w.rpn_cls = 1.0,
            "rpn_reg" => w.rpn_reg = 1.0,
            "box_cls" => w.box_cls = 1.0,
            "box_reg" => w.box_reg = 1.0,
            "box_distill" => w.box_distill = 1.0,
            "feat_distill" => w.feat_distill = 1.0,
            "rpn_distill" => w.rpn_distill = 1.0,
            other => panic!("unknown loss term {other}"),
        }
        w
    }
}

/// Which parameter groups receive updates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub stem: bool,
    pub branches: Vec<bool>,
    pub rpn: bool,
    pub head: bool,
}

impl Trainable {
    pub fn all<T>(model: &Detector<T>) -> Self {
        Trainable {
            stem: true,
            branches: vec![true; model.branches.len()],
            rpn: true,
            head: true,
        }
    }

    /// Dynamic Y-KD after the first step trains only the newest branch, the
    /// RPN and the head; everything else trains all groups.
    pub fn for_method<T>(model: &Detector<T>, method: Method, step: usize) -> Self {
        if method == Method::DynYkd && step > 0 {
            let n = model.branches.len();
            Trainable {
                stem: false,
                branches: (0..n).map(|i| i + 1 == n).collect(),
                rpn: true,
                head: true,
            }
        } else {
            Trainable::all(model)
        }
    }

    pub fn allows(&self, c: Component) -> bool {
        match c {
            Component::Stem => self.stem,
            Component::Branch(i) => self.branches.get(i).copied().unwrap_or(false),
            Component::Rpn => self.rpn,
            Component::Head => self.head,
        }
    }
}

/// Loss configuration for one step.
#[derive(Clone, Debug)]
pub struct Objective<'a, T> {
    pub method: Method,
    pub teacher: Option<&'a TeacherBundle<T>>,
    pub distill: &'a DistillationConfig,
    pub weights: TermWeights,
    pub trainable: Trainable,
}

fn scaled<T: Scalar>(v: &[T], s: f64) -> Vec<T> {
    let s = T::of(s);
    v.iter().map(|&x| x * s).collect()
}

fn add_into<T: Scalar>(acc: &mut Option<Grid<T>>, g: Option<Grid<T>>) {
    if let (Some(a), Some(g)) = (acc.as_mut(), g) {
        a.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += *y);
    }
}

impl<'a, T: Scalar> Objective<'a, T> {
    pub fn new(
        method: Method,
        teacher: Option<&'a TeacherBundle<T>>,
        distill: &'a DistillationConfig,
        trainable: Trainable,
    ) -> Self {
        Objective {
            method,
            teacher,
            distill,
            weights: TermWeights::for_method(method, distill),
            trainable,
        }
    }

    /// The teacher, if this method consults one.
    fn active_teacher(&self) -> Option<&'a TeacherBundle<T>> {
        if self.method.uses_teacher() {
            self.teacher
        } else {
            None
        }
    }

    /// Evaluates the weighted loss on one image. A missing `plan` is sampled
    /// (and stored) after the RPN forward; gradients are accumulated into
    /// `grads` when given.
    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        model: &Detector<T>,
        ex: &Example<T>,
        plan: &mut Option<SamplePlan<T>>,
        rng: &mut R,
        mut grads: Option<&mut Detector<T>>,
    ) -> Result<LossBreakdown> {
        let image = &ex.image;
        model.check_image(image)?;
        let w = self.weights;
        let tr = &self.trainable;
        let teacher = self.active_teacher();
        let branch = model.active_branch();
        let want = grads.is_some();
        let keep_stem = want && tr.stem;
        let keep_ext = want && (tr.stem || tr.allows(Component::Branch(branch)));
        let (x, trace) = model.backbone_trace(branch, image, keep_stem, keep_ext);
        let rpn = model.rpn_forward(&x);
        if plan.is_none() {
            let n = if teacher.is_some() { self.distill.n_rois } else { 0 };
            *plan = Some(sample_plan(model, &rpn, &x, image.w, image.h, &ex.targets, n, rng)?);
        }
        let plan = plan.as_ref().expect("plan was just set");

        let (head, htrace) = model.head_forward(&x, &plan.roi_boxes());
        let (sup, og) = supervised_loss(&rpn, &head, plan, model.config.smooth_l1_beta)?;
        let mut loss = LossBreakdown {
            rpn_cls: sup.rpn_cls * w.rpn_cls,
            rpn_reg: sup.rpn_reg * w.rpn_reg,
            box_cls: sup.box_cls * w.box_cls,
            box_reg: sup.box_reg * w.box_reg,
            ..Default::default()
        };
        let mut d_rpn_logits = scaled(&og.rpn_logits, w.rpn_cls);
        let mut d_rpn_deltas = scaled(&og.rpn_deltas, w.rpn_reg);
        let mut dx: Option<Grid<T>> = keep_ext.then(|| Grid::zeros(x.h, x.w, x.c));

        if let Some(g) = grads.as_deref_mut() {
            let d = model.head.backward(
                &htrace,
                &scaled(&og.head_logits, w.box_cls),
                &scaled(&og.head_deltas, w.box_reg),
                tr.head.then_some(&mut g.head),
                keep_ext,
            );
            add_into(&mut dx, d);
        }

        if let Some(teacher) = teacher.filter(|_| !plan.distill.is_empty()) {
            let boxes = plan.distill_boxes();
            let anchors = plan.distill_anchors();
            let head_only = teacher.is_head_only();
            let (sh, strace) = model.head_forward(&x, &boxes);
            let tout = teacher.outputs(image, &x, &boxes, &anchors, keep_ext && head_only)?;

            let (vb, gb) = box_head_distill_grad(&sh, &tout.head)?;
            loss.box_distill = w.box_distill * vb.f64();
            let (vr, gr) = rpn_distill_grad(&rpn.select(&anchors), &tout.rpn, self.distill.tau, self.distill.rpn_indicator)?;
            loss.rpn_distill = w.rpn_distill * vr.f64();
            let (wr, wb) = (T::of(w.rpn_distill), T::of(w.box_distill));
            for (k, &a) in anchors.iter().enumerate() {
                d_rpn_logits[a] += wr * gr.student_logits[k];
                for j in 0..4 {
                    d_rpn_deltas[4 * a + j] += wr * gr.student_deltas[4 * k + j];
                }
            }
            if let Some(tf) = &tout.features {
                let (vf, dsf, _) = feature_distill_grad(&x, tf)?;
                loss.feat_distill = w.feat_distill * vf.f64();
                add_into(&mut dx, Some(Grid { data: scaled(&dsf.data, w.feat_distill), ..dsf }));
            }

            if let Some(g) = grads.as_deref_mut() {
                let d = model.head.backward(
                    &strace,
                    &scaled(&gb.student_logits, w.box_distill),
                    &scaled(&gb.student_deltas, w.box_distill),
                    tr.head.then_some(&mut g.head),
                    keep_ext,
                );
                add_into(&mut dx, d);
            }
            // Head-only teachers read the student's features, so their
            // (frozen) layers pass gradient back into the extractor.
            if let (TeacherKind::Head { rpn: trpn, head: thead }, true) = (teacher.kind(), keep_ext) {
                let t_trace = tout.trace.as_ref().expect("trace requested");
                let d = thead.backward(
                    t_trace,
                    &gb.teacher_logits.iter().map(|&v| v * wb).collect::<Vec<_>>(),
                    &gb.teacher_deltas.iter().map(|&v| v * wb).collect::<Vec<_>>(),
                    None,
                    true,
                );
                add_into(&mut dx, d);
                let mut tl = vec![T::zero(); rpn.num_anchors()];
                let mut td = vec![T::zero(); rpn.deltas.len()];
                for (k, &a) in anchors.iter().enumerate() {
                    tl[a] += wr * gr.teacher_logits[k];
                    for j in 0..4 {
                        td[4 * a + j] += wr * gr.teacher_deltas[4 * k + j];
                    }
                }
                add_into(&mut dx, trpn.backward(&x, &tl, &td, None, true));
            }
        }

        if let Some(g) = grads {
            let d = model
                .rpn
                .backward(&x, &d_rpn_logits, &d_rpn_deltas, tr.rpn.then_some(&mut g.rpn), keep_ext);
            add_into(&mut dx, d);
            if let Some(dx) = dx {
                let ext_grads = tr
                    .allows(Component::Branch(branch))
                    .then(|| g.branches[branch].extractor.as_mut_slice());
                let ds = conv_chain_backward(&model.branches[branch].extractor, &trace.extractor, dx, ext_grads, keep_stem);
                if let Some(ds) = ds {
                    conv_chain_backward(&model.stem, &trace.stem, ds, Some(g.stem.as_mut_slice()), false);
                }
            }
        }
        Ok(loss)
    }
}
