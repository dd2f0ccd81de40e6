//! b-n incremental scenarios and the per-step label-filtered views.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{split_train_test, Annotation, DatasetIndex, ImageRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Partitions class ids `1..=num_classes` into a base step of `b` classes and
/// increments of `n` (the final increment may be shorter).
pub fn partition_classes(num_classes: usize, b: usize, n: usize) -> Result<Vec<Vec<u32>>> {
    if b == 0 || n == 0 {
        return Err(Error::config("b and n must be at least 1"));
    }
    if b > num_classes {
        return Err(Error::config(format!(
            "b exceeds class count ({b} > {num_classes})"
        )));
    }
    let ids: Vec<u32> = (1..=num_classes as u32).collect();
    let mut steps = vec![ids[..b].to_vec()];
    steps.extend(ids[b..].chunks(n).map(<[u32]>::to_vec));
    Ok(steps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementalScenario {
    pub b: usize,
    pub n: usize,
    pub class_order: Vec<String>,
    pub steps: Vec<Vec<u32>>,
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub seed: u64,
}

impl IncrementalScenario {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn num_classes(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    /// Classes seen up to and including step `t`.
    pub fn seen_classes(&self, t: usize) -> Vec<u32> {
        self.steps[..=t.min(self.steps.len() - 1)].concat()
    }

    /// `"b-n"`, e.g. `"3-2"`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.b, self.n)
    }

    pub fn manifest(&self) -> ScenarioManifest {
        #[derive(Serialize)]
        struct Body<'a> {
            b: usize,
            n: usize,
            class_order: &'a [String],
            steps: &'a [Vec<u32>],
            train_ids: &'a [u64],
            test_ids: &'a [u64],
            seed: u64,
        }
        let body = Body {
            b: self.b,
            n: self.n,
            class_order: &self.class_order,
            steps: &self.steps,
            train_ids: &self.train_ids,
            test_ids: &self.test_ids,
            seed: self.seed,
        };
        let bytes = serde_json::to_vec(&body).expect("manifest body serializes");
        ScenarioManifest {
            b: self.b,
            n: self.n,
            class_order: self.class_order.clone(),
            steps: self.steps.clone(),
            train_ids: self.train_ids.clone(),
            test_ids: self.test_ids.clone(),
            seed: self.seed,
            content_hash: hex::encode(Sha256::digest(&bytes)),
        }
    }
}

/// On-disk scenario description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub b: usize,
    pub n: usize,
    pub class_order: Vec<String>,
    pub steps: Vec<Vec<u32>>,
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub seed: u64,
    pub content_hash: String,
}

impl ScenarioManifest {
    pub fn into_scenario(self) -> IncrementalScenario {
        IncrementalScenario {
            b: self.b,
            n: self.n,
            class_order: self.class_order,
            steps: self.steps,
            train_ids: self.train_ids,
            test_ids: self.test_ids,
            seed: self.seed,
        }
    }
}

/// Builds the class partition and a stratified train/test split.
pub fn build_scenario(
    ds: &DatasetIndex,
    b: usize,
    n: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<IncrementalScenario> {
    let steps = partition_classes(ds.num_classes(), b, n)?;
    let (train_ids, test_ids) = split_train_test(ds, test_fraction, seed)?;
    Ok(IncrementalScenario {
        b,
        n,
        class_order: ds.classes.iter().map(|c| c.name.clone()).collect(),
        steps,
        train_ids,
        test_ids,
        seed,
    })
}

/// Images and annotations visible at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDataset {
    pub step: usize,
    /// Classes whose annotations are kept.
    pub classes: Vec<u32>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
}

impl StepDataset {
    /// Train images with every annotation kept, for the non-incremental upper bound.
    pub fn joint(ds: &DatasetIndex, sc: &IncrementalScenario) -> Result<Self> {
        let all: Vec<u32> = sc.steps.concat();
        let mut view = filtered(ds, &sc.train_ids, &all, true);
        view.step = 0;
        if view.images.is_empty() {
            return Err(Error::EmptyStep { step: 0 });
        }
        Ok(view)
    }

    pub fn annotations_for(&self, image_id: u64) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }
}

fn filtered(ds: &DatasetIndex, ids: &[u64], classes: &[u32], require_annotation: bool) -> StepDataset {
    let ids: HashSet<u64> = ids.iter().copied().collect();
    let keep: HashSet<u32> = classes.iter().copied().collect();
    let annotations: Vec<Annotation> = ds
        .annotations
        .iter()
        .filter(|a| ids.contains(&a.image_id) && keep.contains(&a.class_id))
        .cloned()
        .collect();
    let annotated: HashSet<u64> = annotations.iter().map(|a| a.image_id).collect();
    let images = ds
        .images
        .iter()
        .filter(|im| ids.contains(&im.id) && (!require_annotation || annotated.contains(&im.id)))
        .cloned()
        .collect();
    StepDataset {
        step: 0,
        classes: classes.to_vec(),
        images,
        annotations,
    }
}

/// The step-`t` view.
///
/// Train: images holding at least one class of step `t`, with annotations of
/// other classes stripped. Test: every test image, annotated with all classes
/// seen up to step `t` (all classes after the final step).
pub fn step_view(ds: &DatasetIndex, sc: &IncrementalScenario, t: usize, split: Split) -> Result<StepDataset> {
    if t >= sc.num_steps() {
        return Err(Error::config(format!(
            "step {t} out of range for {} steps",
            sc.num_steps()
        )));
    }
    let mut view = match split {
        Split::Train => {
            let v = filtered(ds, &sc.train_ids, &sc.steps[t], true);
            if v.images.is_empty() {
                return Err(Error::EmptyStep { step: t });
            }
            v
        }
        Split::Test => filtered(ds, &sc.test_ids, &sc.seen_classes(t), false),
    };
    view.step = t;
    Ok(view)
}
