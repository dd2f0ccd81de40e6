//! Incremental training: schedules, SGD, teacher snapshots and the step loop.

mod objective;
mod runlog;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch::grow_branch;
use crate::dataset::{load_image, step_view, DatasetIndex, IncrementalScenario, Split, StepDataset};
use crate::detector::{derive_seed, Detector, DetectorConfig, LossBreakdown, TrainTargets};
use crate::distill::{DistillationConfig, Method, TeacherBundle};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::scalar::Scalar;

pub use objective::{Example, Objective, TermWeights, Trainable};
pub use runlog::{LogRecord, RunLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub lr: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Gradient-norm ceiling; off when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Linear warm-up length, in iterations.
    #[serde(default)]
    pub warmup: usize,
}

fn default_gamma() -> f64 {
    0.1
}
fn default_batch() -> usize {
    4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}

impl TrainSchedule {
    pub fn new(iterations: usize, lr: f64) -> Self {
        TrainSchedule {
            iterations,
            lr,
            milestones: Vec::new(),
            gamma: default_gamma(),
            batch_size: default_batch(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            clip_norm: None,
            warmup: 0,
        }
    }

    pub fn with_milestones(mut self, m: &[usize]) -> Self {
        self.milestones = m.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("decay factor must lie in (0, 1], got {}", self.gamma));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1])
            || self.milestones.last().is_some_and(|&m| m >= self.iterations)
        {
            return bad("milestones must be strictly increasing and below the iteration count".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight decay be non-negative".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    /// Learning rate used at iteration `it` (0-based).
    pub fn lr_at(&self, it: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| it >= m).count();
        let mut lr = self.lr * self.gamma.powi(decays as i32);
        if it < self.warmup {
            lr *= (it + 1) as f64 / self.warmup as f64;
        }
        lr
    }

    /// Same schedule with iterations and milestones multiplied by `k`.
    pub fn scaled(&self, k: usize) -> Self {
        TrainSchedule {
            iterations: self.iterations * k,
            milestones: self.milestones.iter().map(|m| m * k).collect(),
            warmup: self.warmup,
            ..self.clone()
        }
    }
}

/// Schedules for the base step, the increments, and joint training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub base: TrainSchedule,
    pub increment: TrainSchedule,
    /// When set, `increment` is per added class and scales with the class count.
    #[serde(default)]
    pub increment_per_class: bool,
    pub joint: TrainSchedule,
}

impl Schedules {
    /// 10k base iterations at 0.005 decayed x0.1 at 8k and 9.5k; increments at
    /// 0.0001 for 2.5k iterations per added class; batch 4.
    pub fn sddd() -> Self {
        let base = TrainSchedule::new(10_000, 0.005).with_milestones(&[8_000, 9_500]);
        Schedules {
            joint: base.clone(),
            base,
            increment: TrainSchedule::new(2_500, 0.0001),
            increment_per_class: true,
        }
    }

    /// 50k base iterations at 0.005; 10k-iteration increments at 0.001; batch 4.
    pub fn oppd() -> Self {
        let base = TrainSchedule::new(50_000, 0.005);
        Schedules {
            joint: base.clone(),
            base,
            increment: TrainSchedule::new(10_000, 0.001),
            increment_per_class: false,
        }
    }

    /// Desk scale for 32-pixel synthetic data: 2k base iterations at 0.02,
    /// 1k-iteration increments at 0.002, decay x0.1 at three quarters.
    pub fn desk() -> Self {
        let mut base = TrainSchedule::new(2_000, 0.02).with_milestones(&[1_500]);
        base.warmup = 50;
        Schedules {
            joint: base.clone(),
            base,
            increment: TrainSchedule::new(1_000, 0.002).with_milestones(&[750]),
            increment_per_class: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.increment.validate()?;
        self.joint.validate()
    }

    pub fn increment_for(&self, new_classes: usize) -> TrainSchedule {
        if self.increment_per_class {
            self.increment.scaled(new_classes.max(1))
        } else {
            self.increment.clone()
        }
    }
}

/// Momentum SGD with coupled weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Detector<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    /// Applies one update to the trainable groups and returns the gradient norm.
    ///
    /// A non-zero gradient on a frozen group is a freeze violation and leaves
    /// the model untouched.
    pub fn step(
        &mut self,
        model: &mut Detector<T>,
        grads: &Detector<T>,
        lr: f64,
        trainable: &Trainable,
        clip_norm: Option<f64>,
    ) -> Result<f64> {
        let gp = grads.named_params();
        if gp.len() != model.named_params().len() {
            return Err(Error::Shape("gradient layout does not match the model".into()));
        }
        let mut sq = 0.0;
        for (name, c, t) in &gp {
            if trainable.allows(*c) {
                sq += t.sum_sq();
            } else if t.data().iter().any(|v| *v != T::zero()) {
                return Err(Error::FreezeViolation(format!("{name} is frozen but received a gradient")));
            }
        }
        let norm = sq.sqrt();
        let clip = match clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let same_layout = self.velocity.as_ref().is_some_and(|v| {
            v.named_params().iter().map(|p| p.2.shape()).eq(gp.iter().map(|p| p.2.shape()))
        });
        if !same_layout {
            self.velocity = Some(model.zeros_like());
        }
        let vel = self.velocity.as_mut().expect("velocity initialized");
        let (lr, mom, wd, clip) = (T::of(lr), T::of(self.momentum), T::of(self.weight_decay), T::of(clip));
        for (((c, p), v), (_, _, g)) in model.params_mut().into_iter().zip(vel.params_mut()).zip(&gp) {
            if !trainable.allows(c) {
                continue;
            }
            let (p, v) = (p.data_mut(), v.1.data_mut());
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let d = *gi * clip + wd * *pi;
                *vi = mom * *vi + d;
                *pi -= lr * *vi;
            }
        }
        Ok(norm)
    }
}

/// Frozen teacher for a step, or `None` for methods without one.
pub fn snapshot_teacher<T: Scalar>(model: &Detector<T>, method: Method) -> Option<TeacherBundle<T>> {
    match method {
        Method::Ilod | Method::Filod => Some(TeacherBundle::full(model)),
        Method::DynYkd => Some(TeacherBundle::head_only(model)),
        Method::Finetune | Method::Joint => None,
    }
}

/// Where in the run an update happens, for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    pub step: usize,
    pub iteration: usize,
}

/// One SGD update on a batch; returns the batch-mean loss breakdown.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut Detector<T>,
    opt: &mut Sgd<T>,
    batch: &[&Example<T>],
    objective: &Objective<'_, T>,
    lr: f64,
    clip_norm: Option<f64>,
    ctx: StepContext,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let mut grads = model.zeros_like();
    let mut total = LossBreakdown::default();
    for ex in batch {
        let mut plan = None;
        let l = objective.evaluate(model, ex, &mut plan, rng, Some(&mut grads))?;
        total.add(&l);
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    let total = total.scaled(inv);
    let gfinite = grads.is_finite();
    if !total.is_finite() || !gfinite {
        return Err(Error::Divergence {
            step: ctx.step,
            iteration: ctx.iteration,
            diagnostics: format!("loss {total:?}, finite gradients: {gfinite}"),
        });
    }
    let s = T::of(inv);
    for (_, t) in grads.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    opt.step(model, &grads, lr, &objective.trainable, clip_norm)?;
    Ok(total)
}

/// Loads a step view as training examples (boxes rescaled to the input size).
pub fn load_examples<T: Scalar>(view: &StepDataset, image_size: u32) -> Result<Vec<Example<T>>> {
    let mut out = Vec::with_capacity(view.images.len());
    for rec in &view.images {
        let (image, sx, sy) = load_image::<T>(rec, image_size)?;
        let mut boxes = Vec::new();
        let mut classes = Vec::new();
        for a in view.annotations_for(rec.id) {
            let b = a.bbox;
            boxes.push(BoundingBox::new(
                T::of(b.x1 * sx),
                T::of(b.y1 * sy),
                T::of(b.x2 * sx),
                T::of(b.y2 * sy),
            ));
            classes.push(a.class_id);
        }
        out.push(Example {
            image_id: rec.id,
            image,
            targets: TrainTargets { boxes, classes },
        });
    }
    Ok(out)
}

/// Settings shared by every step of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub distill: DistillationConfig,
    pub schedules: Schedules,
    pub seed: u64,
    /// Log every n-th iteration (and the last one of each step).
    pub log_every: usize,
}

impl RunConfig {
    /// Default detector and distillation weights with the desk schedules.
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            detector: DetectorConfig::default(),
            distill: DistillationConfig::default(),
            schedules: Schedules::desk(),
            seed,
            log_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.distill.validate()?;
        self.schedules.validate()?;
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        Ok(())
    }
}

/// Called after each completed step with the step index and the model.
pub type StepObserver<'a, T> = dyn FnMut(usize, &Detector<T>) -> Result<()> + 'a;

fn hash_teacher_outputs<T: Scalar>(teacher: &TeacherBundle<T>, probe: &TeacherProbe<T>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let out = teacher.outputs(&probe.example.image, &probe.features, &probe.rois, &probe.anchors, false)?;
    let mut h = Sha256::new();
    for v in out.rpn.logits.iter().chain(&out.rpn.deltas).chain(&out.head.logits).chain(&out.head.deltas) {
        h.update(v.f64().to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// A fixed input for checking that a teacher does not drift during a step.
struct TeacherProbe<T> {
    example: Example<T>,
    features: crate::tensor::Grid<T>,
    rois: Vec<BoundingBox<T>>,
    anchors: Vec<usize>,
}

fn probe_for<T: Scalar>(model: &Detector<T>, ex: &Example<T>) -> Result<TeacherProbe<T>> {
    let out = model.forward(&ex.image)?;
    let props = model.proposals(&out.rpn, &out.features, ex.image.w, ex.image.h);
    Ok(TeacherProbe {
        example: ex.clone(),
        rois: props.iter().take(8).map(|p| p.bbox).collect(),
        anchors: props.iter().take(8).map(|p| p.anchor).collect(),
        features: out.features,
    })
}

/// Trains for `schedule.iterations` on `data`, logging into `log`.
#[allow(clippy::too_many_arguments)]
fn train_phase<T: Scalar>(
    model: &mut Detector<T>,
    data: &[Example<T>],
    objective: &Objective<'_, T>,
    schedule: &TrainSchedule,
    step: usize,
    seed: u64,
    log_every: usize,
    log: &mut RunLog,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyStep { step });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + step as u64));
    let mut opt = Sgd::new(schedule.momentum, schedule.weight_decay);
    for it in 0..schedule.iterations {
        let batch: Vec<&Example<T>> = (0..schedule.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let lr = schedule.lr_at(it);
        let ctx = StepContext { step, iteration: it };
        let loss = train_step(model, &mut opt, &batch, objective, lr, schedule.clip_norm, ctx, &mut rng)?;
        if it % log_every == 0 || it + 1 == schedule.iterations {
            log.push(LogRecord::iteration(step, it, lr, loss));
        }
    }
    Ok(())
}

/// Step 0 from scratch on `data` with the base schedule. Identical for every
/// incremental method given the seed.
pub fn train_base<T: Scalar>(
    data: &[Example<T>],
    classes: &[u32],
    cfg: &RunConfig,
    log: &mut RunLog,
) -> Result<Detector<T>> {
    let start = Instant::now();
    let mut model = Detector::with_classes(cfg.detector.clone(), classes, cfg.seed)?;
    let objective = Objective::new(Method::Finetune, None, &cfg.distill, Trainable::all(&model));
    train_phase(&mut model, data, &objective, &cfg.schedules.base, 0, cfg.seed, cfg.log_every, log)?;
    log.push(LogRecord::step_end(0, &model, start.elapsed().as_secs_f64(), None));
    Ok(model)
}

/// Steps `1..` of a scenario starting from a trained step-0 model.
pub fn continue_incremental<T: Scalar>(
    mut model: Detector<T>,
    method: Method,
    steps: &[(Vec<u32>, Vec<Example<T>>)],
    cfg: &RunConfig,
    log: &mut RunLog,
    observer: &mut StepObserver<'_, T>,
) -> Result<Detector<T>> {
    if method == Method::Joint {
        return Err(Error::config("joint training has no incremental steps"));
    }
    for (i, (classes, data)) in steps.iter().enumerate() {
        let step = i + 1;
        if data.is_empty() {
            return Err(Error::EmptyStep { step });
        }
        let start = Instant::now();
        let teacher = snapshot_teacher(&model, method);
        let head_seed = derive_seed(cfg.seed, 500 + step as u64);
        if method == Method::DynYkd {
            grow_branch(&mut model, step, classes, head_seed)?;
        } else {
            model.extend_head(classes, head_seed)?;
        }
        let probe = match &teacher {
            Some(t) => {
                let p = probe_for(&model, &data[0])?;
                let h = hash_teacher_outputs(t, &p)?;
                Some((p, h, t.param_hash()))
            }
            None => None,
        };
        let trainable = Trainable::for_method(&model, method, step);
        let objective = Objective::new(method, teacher.as_ref(), &cfg.distill, trainable);
        let schedule = cfg.schedules.increment_for(classes.len());
        train_phase(&mut model, data, &objective, &schedule, step, cfg.seed, cfg.log_every, log)?;
        let teacher_check = match (&teacher, probe) {
            (Some(t), Some((p, h0, ph0))) => {
                let h1 = hash_teacher_outputs(t, &p)?;
                Some(runlog::TeacherCheck {
                    params_start: ph0,
                    params_end: t.param_hash(),
                    outputs_start: h0,
                    outputs_end: h1,
                    forward_count: t.forward_count(),
                })
            }
            _ => None,
        };
        log.push(LogRecord::step_end(step, &model, start.elapsed().as_secs_f64(), teacher_check));
        observer(step, &model)?;
    }
    Ok(model)
}

/// Loads the per-step training views of a scenario.
pub fn load_steps<T: Scalar>(
    ds: &DatasetIndex,
    scenario: &IncrementalScenario,
    image_size: u32,
) -> Result<Vec<(Vec<u32>, Vec<Example<T>>)>> {
    (0..scenario.num_steps())
        .map(|t| {
            let view = step_view(ds, scenario, t, Split::Train)?;
            Ok((scenario.steps[t].clone(), load_examples(&view, image_size)?))
        })
        .collect()
}

/// Trains once on every class with the joint schedule.
pub fn train_joint<T: Scalar>(data: &[Example<T>], classes: &[u32], cfg: &RunConfig, log: &mut RunLog) -> Result<Detector<T>> {
    let start = Instant::now();
    let mut model = Detector::with_classes(cfg.detector.clone(), classes, cfg.seed)?;
    let objective = Objective::new(Method::Joint, None, &cfg.distill, Trainable::all(&model));
    train_phase(&mut model, data, &objective, &cfg.schedules.joint, 0, cfg.seed, cfg.log_every, log)?;
    log.push(LogRecord::step_end(0, &model, start.elapsed().as_secs_f64(), None));
    Ok(model)
}

/// Full run of one method on a scenario.
pub fn run_incremental<T: Scalar>(
    ds: &DatasetIndex,
    scenario: &IncrementalScenario,
    method: Method,
    cfg: &RunConfig,
    observer: &mut StepObserver<'_, T>,
) -> Result<(Detector<T>, RunLog)> {
    cfg.validate()?;
    if scenario.num_steps() == 0 {
        return Err(Error::config("scenario has no steps"));
    }
    let mut log = RunLog::new(method, cfg);
    let size = cfg.detector.image_size;
    if method == Method::Joint {
        let view = StepDataset::joint(ds, scenario)?;
        let data = load_examples(&view, size)?;
        let model = train_joint(&data, &scenario.steps.concat(), cfg, &mut log)?;
        observer(0, &model)?;
        return Ok((model, log));
    }
    let steps = load_steps(ds, scenario, size)?;
    let model = train_base(&steps[0].1, &steps[0].0, cfg, &mut log)?;
    observer(0, &model)?;
    let model = continue_incremental(model, method, &steps[1..], cfg, &mut log, observer)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schedules() {
        let s = Schedules::sddd();
        assert_eq!(s.base.iterations, 10_000);
        assert_eq!(s.base.lr, 0.005);
        assert_eq!(s.base.milestones, vec![8_000, 9_500]);
        assert_eq!(s.base.gamma, 0.1);
        assert_eq!(s.increment.lr, 0.0001);
        assert_eq!(s.increment_for(3).iterations, 7_500);
        assert_eq!(s.base.batch_size, 4);
        let o = Schedules::oppd();
        assert_eq!((o.base.iterations, o.base.lr), (50_000, 0.005));
        assert_eq!((o.increment_for(5).iterations, o.increment.lr), (10_000, 0.001));
        assert!(s.validate().is_ok() && o.validate().is_ok());
    }

    #[test]
    fn lr_decays_at_milestones() {
        let s = TrainSchedule::new(10_000, 0.005).with_milestones(&[8_000, 9_500]);
        assert_eq!(s.lr_at(0), 0.005);
        assert!((s.lr_at(8_000) - 0.0005).abs() < 1e-15);
        assert!((s.lr_at(9_999) - 0.00005).abs() < 1e-15);
    }

    #[test]
    fn bad_milestones_are_rejected() {
        assert!(TrainSchedule::new(10, 0.1).with_milestones(&[5, 5]).validate().is_err());
        assert!(TrainSchedule::new(10, 0.1).with_milestones(&[10]).validate().is_err());
        assert!(TrainSchedule::new(10, 0.0).validate().is_err());
    }
}
