//! `<out>/<scenario>/<method>/<seed>/{checkpoints, runlog, report}`.

use std::path::{Path, PathBuf};

use incdet::distill::Method;

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "INCDET_OUT";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioDir(pub PathBuf);

impl ScenarioDir {
    pub fn new(out: &Path, scenario: &str) -> Self {
        ScenarioDir(out.join(scenario))
    }

    pub fn manifest(&self) -> PathBuf {
        self.0.join("manifest.json")
    }

    pub fn step_annotations(&self, step: usize, split: &str) -> PathBuf {
        self.0.join("steps").join(format!("step_{step}_{split}.json"))
    }

    pub fn run(&self, method: Method, seed: u64) -> RunDir {
        RunDir(self.0.join(method.name()).join(seed.to_string()))
    }

    pub fn summary(&self, ext: &str) -> PathBuf {
        self.0.join(format!("summary.{ext}"))
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.0.join("plots").join(format!("{name}.svg"))
    }

    pub fn status(&self) -> PathBuf {
        self.0.join("runs.json")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.0.join("checkpoints").join(format!("step_{step}.bin"))
    }

    pub fn runlog(&self) -> PathBuf {
        self.0.join("runlog").join("runlog.ndjson")
    }

    pub fn report_json(&self) -> PathBuf {
        self.0.join("report").join("report.json")
    }

    pub fn report_md(&self) -> PathBuf {
        self.0.join("report").join("report.md")
    }
}

/// `--out` wins over the environment, which wins over the config file.
pub fn resolve_out(flag: Option<&Path>, config: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => config.to_path_buf(),
    }
}
