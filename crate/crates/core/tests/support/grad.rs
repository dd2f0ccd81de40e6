//! Micro-detector probe for central finite-difference checks.

use incdet::branch::grow_branch;
use incdet::detector::{ConvSpec, Detector, DetectorConfig, SamplePlan, TrainTargets};
use incdet::distill::{DistillationConfig, Method, TeacherBundle};
use incdet::geometry::BoundingBox;
use incdet::tensor::Grid;
use incdet::trainer::{Example, Objective, TermWeights, Trainable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn micro_config() -> DetectorConfig {
    let mut c = DetectorConfig::default();
    c.image_size = 8;
    c.stem = vec![ConvSpec { channels: 4, stride: 2 }];
    c.extractor = vec![ConvSpec { channels: 4, stride: 2 }];
    c.anchor_sizes = vec![4.0];
    c.anchor_ratios = vec![0.5, 2.0];
    c.pool_size = 2;
    c.head_hidden = 6;
    c.rpn.batch_size = 8;
    c.rpn.pre_nms_top_n = 8;
    c.rpn.post_nms_top_n = 3;
    c.roi.batch_size = 4;
    c
}

pub fn micro_example(seed: u64) -> Example<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Example {
        image_id: seed,
        image: Grid::from_vec(8, 8, 3, data).unwrap(),
        targets: TrainTargets {
            boxes: vec![BoundingBox::new(1.0, 1.5, 4.5, 5.0), BoundingBox::new(3.5, 2.0, 7.0, 7.5)],
            classes: vec![1, 3],
        },
    }
}

pub fn jitter(model: &mut Detector<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.params_mut() {
        for v in t.data_mut() {
            *v += std * rng.random_range(-1.0..1.0);
        }
    }
}

pub struct Case {
    pub student: Detector<f64>,
    pub teacher: Option<TeacherBundle<f64>>,
    pub method: Method,
}

pub fn case(method: Method) -> Case {
    let mut base = Detector::<f64>::with_classes(micro_config(), &[1, 2], 7).unwrap();
    jitter(&mut base, 0.05, 11);
    let teacher = match method {
        Method::Ilod | Method::Filod => Some(TeacherBundle::full(&base)),
        Method::DynYkd => Some(TeacherBundle::head_only(&base)),
        _ => None,
    };
    let mut student = base.clone();
    if method == Method::DynYkd {
        grow_branch(&mut student, 1, &[3], 13).unwrap();
    } else {
        student.extend_head(&[3], 13).unwrap();
    }
    // Student and teacher must disagree for the distillation terms to be nonzero.
    jitter(&mut student, 0.05, 17);
    Case { student, teacher, method }
}

pub fn objective<'a>(c: &'a Case, cfg: &'a DistillationConfig, term: &str) -> Objective<'a, f64> {
    let mut o = Objective::new(c.method, c.teacher.as_ref(), cfg, Trainable::all(&c.student));
    o.weights = TermWeights::only(term);
    o
}

/// Checks every parameter; returns (checked, worst relative error).
pub fn check(c: &Case, term: &str, ex: &Example<f64>) -> (usize, f64) {
    let cfg = DistillationConfig { n_rois: 4, ..Default::default() };
    let obj = objective(c, &cfg, term);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut plan: Option<SamplePlan<f64>> = None;
    let mut grads = c.student.zeros_like();
    let l0 = obj.evaluate(&c.student, ex, &mut plan, &mut rng, Some(&mut grads)).unwrap();
    assert!(l0.total() > 0.0, "{term} is zero at the probe point");
    let analytic: Vec<Vec<f64>> = grads.params_mut().into_iter().map(|(_, t)| t.data().to_vec()).collect();

    let mut model = c.student.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (pi, ga) in analytic.iter().enumerate() {
        for k in 0..ga.len() {
            let orig = model.params_mut()[pi].1.data()[k];
            let mut at = |v: f64| {
                model.params_mut()[pi].1.data_mut()[k] = v;
                obj.evaluate(&model, ex, &mut plan, &mut rng, None).unwrap().total()
            };
            let num = (at(orig + EPS) - at(orig - EPS)) / (2.0 * EPS);
            model.params_mut()[pi].1.data_mut()[k] = orig;
            let a = ga[k];
            let scale = a.abs().max(num.abs());
            let err = if scale < 1e-7 { (a - num).abs() } else { (a - num).abs() / scale };
            worst = worst.max(err);
            checked += 1;
        }
    }
    (checked, worst)
}

/// Every loss term with the method whose objective contains it.
pub const TERMS: [(Method, &str); 9] = [
    (Method::Finetune, "rpn_cls"),
    (Method::Finetune, "rpn_reg"),
    (Method::Finetune, "box_cls"),
    (Method::Finetune, "box_reg"),
    (Method::Ilod, "box_distill"),
    (Method::Filod, "feat_distill"),
    (Method::Filod, "rpn_distill"),
    (Method::DynYkd, "box_distill"),
    (Method::DynYkd, "rpn_distill"),
];

/// Worst relative error of one term over every parameter, and the count checked.
pub fn term_error(method: Method, term: &str) -> (usize, f64) {
    check(&case(method), term, &micro_example(1))
}
