//! Dataset model, ingestion, synthetic generation, splitting, and b-n scenarios.

mod coco;
mod scenario;
mod split;
mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub use coco::{load_coco_subset, write_coco_subset};
pub use scenario::{
    build_scenario, partition_classes, step_view, IncrementalScenario, ScenarioManifest, Split,
    StepDataset,
};
pub use split::split_train_test;
pub use synthetic::{
    generate_synthetic, load_image, rasterize, ShapeFamily, ShapeInstance, SyntheticRecipe,
    SyntheticSpec,
};

/// Where the pixels of an image come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    File(PathBuf),
    Synthetic(SyntheticRecipe),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub source: ImageSource,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    pub class_id: u32,
    pub bbox: BoundingBox<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
}

/// Images, box annotations, and the canonical class list.
///
/// Classes are sorted alphabetically by name and numbered `1..=K`; id 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub classes: Vec<ClassInfo>,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    /// Annotations grouped by image id.
    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut map: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }

    /// Checks referential integrity and the canonical class order.
    pub fn validate(&self) -> Result<()> {
        let mut seen_names = HashSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if c.id as usize != i + 1 {
                return Err(Error::Integrity(format!(
                    "class '{}' has id {} at position {}; ids must be 1..K",
                    c.name,
                    c.id,
                    i + 1
                )));
            }
            if !seen_names.insert(c.name.as_str()) {
                return Err(Error::Integrity(format!("duplicate class name '{}'", c.name)));
            }
        }
        if self.classes.windows(2).any(|w| w[0].name > w[1].name) {
            return Err(Error::Integrity("classes are not in alphabetical order".into()));
        }
        let mut image_ids = HashSet::new();
        for im in &self.images {
            if !image_ids.insert(im.id) {
                return Err(Error::Integrity(format!("duplicate image id {}", im.id)));
            }
        }
        let k = self.classes.len() as u32;
        for (i, a) in self.annotations.iter().enumerate() {
            if !image_ids.contains(&a.image_id) {
                return Err(Error::Integrity(format!(
                    "annotation {i} references unknown image_id {}",
                    a.image_id
                )));
            }
            if a.class_id == 0 || a.class_id > k {
                return Err(Error::Integrity(format!(
                    "annotation {i} references unknown class_id {}",
                    a.class_id
                )));
            }
            if !a.bbox.is_valid() {
                return Err(Error::Integrity(format!("annotation {i} has an inverted box")));
            }
        }
        Ok(())
    }

    /// Re-sorts classes alphabetically, renumbers them `1..=K`, and rewrites annotations.
    ///
    /// Returns the mapping from the previous id to the new one.
    pub fn canonicalize_classes(&mut self) -> Result<HashMap<u32, u32>> {
        let mut sorted = self.classes.clone();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        if sorted.windows(2).any(|w| w[0].name == w[1].name) {
            return Err(Error::Integrity("duplicate class names".into()));
        }
        let mapping: HashMap<u32, u32> = sorted
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, i as u32 + 1))
            .collect();
        if mapping.len() != sorted.len() {
            return Err(Error::Integrity("duplicate class ids".into()));
        }
        for (i, a) in self.annotations.iter_mut().enumerate() {
            a.class_id = *mapping.get(&a.class_id).ok_or_else(|| {
                Error::Integrity(format!(
                    "annotation {i} references unknown category {}",
                    a.class_id
                ))
            })?;
        }
        self.classes = sorted
            .into_iter()
            .enumerate()
            .map(|(i, c)| ClassInfo {
                id: i as u32 + 1,
                name: c.name,
            })
            .collect();
        Ok(mapping)
    }
}
