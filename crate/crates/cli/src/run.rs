//! Trains every (method, seed) pair and writes per-run artifacts.

use std::path::Path;

use incdet::branch::{resource_report, ResourceReport};
use incdet::dataset::{step_view, DatasetIndex, IncrementalScenario, Split, StepDataset};
use incdet::distill::Method;
use incdet::eval::{collect_predictions, EvalReport, GroundTruth, GroupMeans};
use incdet::tensor::Grid;
use incdet::trainer::{
    continue_incremental, load_examples, load_steps, train_base, train_joint, Example, LogRecord, RunLog,
};
use incdet::Detector32;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::layout::{RunDir, ScenarioDir};
use crate::prepare::{scenario_for, write_pretty_json};

/// Evaluation after one step, over the classes seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEval {
    pub step: usize,
    pub groups: GroupMeans,
    pub headline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub report: EvalReport,
    pub per_step: Vec<StepEval>,
    pub resources: ResourceReport,
    /// False if any teacher changed during a step.
    pub teacher_unchanged: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStatus {
    pub method: Method,
    pub seed: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Test images plus the ground truth visible after each step.
pub struct TestSet {
    pub images: Vec<(u64, Grid<f32>)>,
    pub gts: Vec<Vec<GroundTruth>>,
}

impl TestSet {
    pub fn load(ds: &DatasetIndex, sc: &IncrementalScenario, image_size: u32) -> CliResult<Self> {
        let last = step_view(ds, sc, sc.num_steps() - 1, Split::Test)?;
        let images = load_examples::<f32>(&last, image_size)?
            .into_iter()
            .map(|e| (e.image_id, e.image))
            .collect();
        let gts = (0..sc.num_steps())
            .map(|t| Ok(ground_truth(&step_view(ds, sc, t, Split::Test)?, image_size)))
            .collect::<CliResult<_>>()?;
        Ok(TestSet { images, gts })
    }
}

/// Ground truth in detector pixel coordinates.
fn ground_truth(view: &StepDataset, image_size: u32) -> Vec<GroundTruth> {
    view.annotations
        .iter()
        .map(|a| {
            let im = view.images.iter().find(|i| i.id == a.image_id).expect("annotation image in view");
            let (sx, sy) = (image_size as f64 / im.width as f64, image_size as f64 / im.height as f64);
            let mut b = a.bbox;
            b.x1 *= sx;
            b.x2 *= sx;
            b.y1 *= sy;
            b.y2 *= sy;
            GroundTruth {
                image_id: a.image_id,
                class_id: a.class_id,
                bbox: b,
            }
        })
        .collect()
}

pub struct Evaluator<'a> {
    pub cfg: &'a ExperimentConfig,
    pub scenario: IncrementalScenario,
    pub names: Vec<String>,
    pub test: TestSet,
}

impl Evaluator<'_> {
    /// Evaluates after `step` over the classes of steps `0..=step`.
    pub fn evaluate(&self, model: &Detector32, step: usize) -> CliResult<EvalReport> {
        let preds = collect_predictions(
            model,
            &self.test.images,
            self.cfg.eval.score_threshold,
            self.cfg.eval.nms_threshold,
        )?;
        Ok(EvalReport::build(
            &preds,
            &self.test.gts[step],
            &self.scenario.steps[..=step],
            &self.names,
            self.cfg.eval.metric,
        ))
    }
}

fn step_eval(step: usize, r: &EvalReport) -> StepEval {
    StepEval {
        step,
        groups: r.groups,
        headline: r.headline(),
    }
}

/// Step-0 model shared by every incremental method of one seed.
#[derive(Clone)]
struct Base {
    model: Detector32,
    log: RunLog,
    eval: StepEval,
}

pub struct Runner<'a> {
    pub cfg: &'a ExperimentConfig,
    pub dir: ScenarioDir,
    pub eval: Evaluator<'a>,
    steps: Vec<(Vec<u32>, Vec<Example<f32>>)>,
    joint: Vec<Example<f32>>,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a ExperimentConfig, ds: &DatasetIndex, out: &Path) -> CliResult<Self> {
        let scenario = scenario_for(cfg, ds)?;
        let size = cfg.detector.image_size;
        let steps = load_steps::<f32>(ds, &scenario, size)?;
        let joint = if cfg.methods.contains(&Method::Joint) {
            load_examples(&StepDataset::joint(ds, &scenario)?, size)?
        } else {
            Vec::new()
        };
        let test = TestSet::load(ds, &scenario, size)?;
        let names = ds.classes.iter().map(|c| c.name.clone()).collect();
        Ok(Runner {
            cfg,
            dir: ScenarioDir::new(out, &cfg.scenario.label()),
            eval: Evaluator {
                cfg,
                scenario,
                names,
                test,
            },
            steps,
            joint,
        })
    }

    /// Runs every configured pair; failures are recorded and the rest proceed.
    pub fn run_all(&self) -> CliResult<Vec<RunStatus>> {
        let mut statuses = Vec::new();
        for &seed in &self.cfg.seeds {
            let mut base: Option<Result<Base, String>> = None;
            for &method in &self.cfg.methods {
                let result = if method == Method::Joint {
                    self.run_joint(seed)
                } else {
                    let b = base.get_or_insert_with(|| self.train_base(seed).map_err(|e| e.to_string()));
                    match b {
                        Ok(b) => self.run_method(method, seed, b.clone()),
                        Err(e) => Err(CliError::Run(format!("step 0 failed: {e}"))),
                    }
                };
                let status = match result {
                    Ok(()) => {
                        log::info!("{method} seed {seed}: done");
                        RunStatus { method, seed, ok: true, error: None }
                    }
                    Err(e) => {
                        log::error!("{method} seed {seed}: {e}");
                        RunStatus { method, seed, ok: false, error: Some(e.to_string()) }
                    }
                };
                statuses.push(status);
            }
        }
        write_pretty_json(&self.dir.status(), &statuses)?;
        Ok(statuses)
    }

    fn train_base(&self, seed: u64) -> CliResult<Base> {
        let rc = self.cfg.run_config(seed);
        let mut log = RunLog::empty();
        let (classes, data) = &self.steps[0];
        let model = train_base(data, classes, &rc, &mut log)?;
        let eval = step_eval(0, &self.eval.evaluate(&model, 0)?);
        Ok(Base { model, log, eval })
    }

    fn finish(&self, rd: &RunDir, method: Method, seed: u64, model: &Detector32, log: &RunLog, per_step: Vec<StepEval>) -> CliResult<()> {
        let last = self.eval.scenario.num_steps() - 1;
        let mut report = self.eval.evaluate(model, last)?;
        report.joint_ratio = None;
        let teacher_unchanged = log.teacher_checks().all(|(_, c)| c.unchanged());
        if !teacher_unchanged {
            return Err(CliError::Run("teacher changed during a step".into()));
        }
        log.write_ndjson(&rd.runlog())?;
        let run = RunReport {
            scenario: self.cfg.scenario.label(),
            method,
            seed,
            config_hash: self.cfg.hash(),
            report,
            per_step,
            resources: resource_report(model),
            teacher_unchanged,
        };
        write_pretty_json(&rd.report_json(), &run)?;
        let md = format!(
            "{}\nconfig `{}`, seed {seed}\n",
            run.report.to_markdown(&format!("{} {}", method.label(), run.scenario)),
            run.config_hash
        );
        std::fs::write(rd.report_md(), md).map_err(|e| CliError::io("writing report", e))?;
        Ok(())
    }

    fn run_method(&self, method: Method, seed: u64, base: Base) -> CliResult<()> {
        let rc = self.cfg.run_config(seed);
        let rd = self.dir.run(method, seed);
        let mut log = RunLog::new(method, &rc);
        log.extend(&base.log);
        base.model.save_checkpoint(&rd.checkpoint(0), 0)?;
        let mut per_step = vec![base.eval];
        let mut observer = |step: usize, m: &Detector32| -> incdet::Result<()> {
            m.save_checkpoint(&rd.checkpoint(step), step)?;
            let r = self.eval.evaluate(m, step).map_err(|e| incdet::Error::Config(e.to_string()))?;
            per_step.push(step_eval(step, &r));
            Ok(())
        };
        let model = continue_incremental(base.model, method, &self.steps[1..], &rc, &mut log, &mut observer)?;
        self.finish(&rd, method, seed, &model, &log, per_step)
    }

    fn run_joint(&self, seed: u64) -> CliResult<()> {
        let rc = self.cfg.run_config(seed);
        let rd = self.dir.run(Method::Joint, seed);
        let mut log = RunLog::new(Method::Joint, &rc);
        let model = train_joint(&self.joint, &self.eval.scenario.steps.concat(), &rc, &mut log)?;
        model.save_checkpoint(&rd.checkpoint(0), 0)?;
        let last = self.eval.scenario.num_steps() - 1;
        let r = self.eval.evaluate(&model, last)?;
        self.finish(&rd, Method::Joint, seed, &model, &log, vec![step_eval(last, &r)])
    }
}

/// Step-0 parameter hash recorded in a run log, if any.
pub fn step0_hash(log: &RunLog) -> Option<String> {
    log.records.iter().find_map(|r| match r {
        LogRecord::StepEnd { step: 0, param_hash, .. } => Some(param_hash.clone()),
        _ => None,
    })
}
