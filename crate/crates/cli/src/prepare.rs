//! Scenario manifests and per-step annotation files.

use std::path::Path;

use incdet::dataset::{build_scenario, step_view, write_coco_subset, DatasetIndex, IncrementalScenario, ScenarioManifest, Split};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::layout::ScenarioDir;

pub fn scenario_for(cfg: &ExperimentConfig, ds: &DatasetIndex) -> CliResult<IncrementalScenario> {
    let s = &cfg.scenario;
    Ok(build_scenario(ds, s.b, s.n, s.test_fraction, s.split_seed)?)
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub(crate) use self::write_json as write_pretty_json;

/// Writes the manifest and one train and one test annotation file per step.
pub fn prepare(cfg: &ExperimentConfig, ds: &DatasetIndex, dir: &ScenarioDir) -> CliResult<ScenarioManifest> {
    let sc = scenario_for(cfg, ds)?;
    let manifest = sc.manifest();
    write_json(&dir.manifest(), &manifest)?;
    for t in 0..sc.num_steps() {
        for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
            let v = step_view(ds, &sc, t, split)?;
            let path = dir.step_annotations(t, name);
            if let Some(d) = path.parent() {
                std::fs::create_dir_all(d).map_err(|e| CliError::io(format!("creating {}", d.display()), e))?;
            }
            write_coco_subset(&path, &v.images, &v.annotations, &ds.classes)?;
        }
    }
    Ok(manifest)
}
