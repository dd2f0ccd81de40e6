//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use incdet::dataset::{generate_synthetic, load_coco_subset, DatasetIndex, SyntheticSpec};
use incdet::detector::DetectorConfig;
use incdet::distill::{DistillationConfig, Method};
use incdet::eval::Metric;
use incdet::trainer::{RunConfig, Schedules};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Where images and annotations come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        classes: usize,
        image_size: u32,
        images: usize,
        seed: u64,
    },
    Coco {
        annotations: PathBuf,
    },
}

impl DatasetSource {
    /// Relative annotation paths resolve against `base`.
    pub fn load(&self, base: &Path) -> CliResult<DatasetIndex> {
        match self {
            DatasetSource::Synthetic {
                classes,
                image_size,
                images,
                seed,
            } => Ok(generate_synthetic(&SyntheticSpec::confusable(
                *classes,
                *image_size,
                *images,
                *seed,
            ))?),
            DatasetSource::Coco { annotations } => {
                let path = if annotations.is_absolute() {
                    annotations.clone()
                } else {
                    base.join(annotations)
                };
                Ok(load_coco_subset(&path)?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub b: usize,
    pub n: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seed of the train/test split.
    #[serde(default)]
    pub split_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.3
}

impl ScenarioConfig {
    pub fn label(&self) -> String {
        format!("{}-{}", self.b, self.n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default)]
    pub metric: Metric,
    #[serde(default = "default_score_thr")]
    pub score_threshold: f64,
    #[serde(default = "default_nms_thr")]
    pub nms_threshold: f64,
}

fn default_score_thr() -> f64 {
    0.05
}
fn default_nms_thr() -> f64 {
    0.5
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metric: Metric::default(),
            score_threshold: default_score_thr(),
            nms_threshold: default_nms_thr(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub scenario: ScenarioConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub distill: DistillationConfig,
    pub schedules: Schedules,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_log_every() -> usize {
    50
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// The bundled desk-scale setup: 6 confusable synthetic classes, 4-2.
    pub fn desk() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            dataset: DatasetSource::Synthetic {
                classes: 6,
                image_size: 32,
                images: 600,
                seed: 1,
            },
            scenario: ScenarioConfig {
                b: 4,
                n: 2,
                test_fraction: 0.3,
                split_seed: 1,
            },
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            detector: DetectorConfig::default(),
            distill: DistillationConfig::default(),
            schedules: Schedules::desk(),
            eval: EvalConfig::default(),
            log_every: default_log_every(),
            out: default_out(),
        }
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    /// Everything checkable before training starts.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        if self.seeds.is_empty() {
            return bad("no seeds selected".into());
        }
        let mut m = self.methods.clone();
        m.sort_by_key(|x| x.name());
        m.dedup();
        if m.len() != self.methods.len() {
            return bad("methods listed twice".into());
        }
        if self.scenario.b == 0 || self.scenario.n == 0 {
            return bad("b and n must be positive".into());
        }
        if let DatasetSource::Synthetic { classes, image_size, .. } = &self.dataset {
            if self.scenario.b > *classes {
                return bad(format!("b exceeds class count ({} > {classes})", self.scenario.b));
            }
            if *image_size != self.detector.image_size {
                return bad(format!(
                    "synthetic images are {image_size}px, detector expects {}px",
                    self.detector.image_size
                ));
            }
        }
        for t in [self.eval.score_threshold, self.eval.nms_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("threshold {t} outside [0, 1]"));
            }
        }
        self.run_config(0).validate()?;
        Ok(())
    }

    pub fn run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            detector: self.detector.clone(),
            distill: self.distill.clone(),
            schedules: self.schedules.clone(),
            seed,
            log_every: self.log_every,
        }
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
