use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::detector::{Component, Detector, LossBreakdown};
use crate::distill::Method;
use crate::error::Result;
use crate::scalar::Scalar;

/// Teacher hashes at the start and end of a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherCheck {
    pub params_start: String,
    pub params_end: String,
    pub outputs_start: String,
    pub outputs_end: String,
    pub forward_count: usize,
}

impl TeacherCheck {
    pub fn unchanged(&self) -> bool {
        self.params_start == self.params_end && self.outputs_start == self.outputs_end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        method: Method,
        config: Box<RunConfig>,
    },
    Iteration {
        step: usize,
        iteration: usize,
        lr: f64,
        loss: LossBreakdown,
        total: f64,
    },
    StepEnd {
        step: usize,
        seconds: f64,
        param_hash: String,
        stem_hash: String,
        branch_hashes: Vec<String>,
        param_count: usize,
        teacher: Option<TeacherCheck>,
    },
}

impl LogRecord {
    pub fn iteration(step: usize, iteration: usize, lr: f64, loss: LossBreakdown) -> Self {
        LogRecord::Iteration {
            step,
            iteration,
            lr,
            loss,
            total: loss.total(),
        }
    }

    pub fn step_end<T: Scalar>(step: usize, model: &Detector<T>, seconds: f64, teacher: Option<TeacherCheck>) -> Self {
        LogRecord::StepEnd {
            step,
            seconds,
            param_hash: model.param_hash(),
            stem_hash: model.component_hash(Component::Stem),
            branch_hashes: (0..model.branches.len())
                .map(|i| model.component_hash(Component::Branch(i)))
                .collect(),
            param_count: model.param_count(),
            teacher,
        }
    }
}

/// Append-only run record, stored as newline-delimited JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn new(method: Method, cfg: &RunConfig) -> Self {
        RunLog {
            records: vec![LogRecord::Start {
                method,
                config: Box::new(cfg.clone()),
            }],
        }
    }

    pub fn empty() -> Self {
        RunLog { records: Vec::new() }
    }

    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, other: &RunLog) {
        self.records.extend(other.records.iter().cloned());
    }

    pub fn losses(&self) -> impl Iterator<Item = (usize, usize, &LossBreakdown, f64)> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Iteration {
                step,
                iteration,
                loss,
                total,
                ..
            } => Some((*step, *iteration, loss, *total)),
            _ => None,
        })
    }

    pub fn teacher_checks(&self) -> impl Iterator<Item = (usize, &TeacherCheck)> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::StepEnd {
                step,
                teacher: Some(t),
                ..
            } => Some((*step, t)),
            _ => None,
        })
    }

    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_ndjson(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(RunLog { records })
    }
}
