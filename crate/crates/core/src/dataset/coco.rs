//! The COCO detection subset: `images`, `annotations`, `categories`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Annotation, ClassInfo, DatasetIndex, ImageRecord, ImageSource};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
}

fn records<R: DeserializeOwned>(root: &Value, key: &str) -> Result<Vec<R>> {
    let arr = root
        .get(key)
        .ok_or_else(|| Error::Parse {
            record: key.to_string(),
            message: "missing top-level key".into(),
        })?
        .as_array()
        .ok_or_else(|| Error::Parse {
            record: key.to_string(),
            message: "expected an array".into(),
        })?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            R::deserialize(v).map_err(|e| Error::Parse {
                record: format!("{key}[{i}]"),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reads a COCO-style annotation file.
///
/// Categories are re-sorted by name and renumbered `1..=K`; `(x, y, w, h)` boxes
/// become corner boxes; `file_name` is resolved relative to the annotation file.
pub fn load_coco_subset(path: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path)?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        record: path.display().to_string(),
        message: e.to_string(),
    })?;
    let images: Vec<CocoImage> = records(&root, "images")?;
    let annotations: Vec<CocoAnnotation> = records(&root, "annotations")?;
    let categories: Vec<CocoCategory> = records(&root, "categories")?;

    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    for (i, c) in categories.iter().enumerate() {
        if !seen.insert(c.id) {
            return Err(Error::Integrity(format!(
                "categories[{i}] repeats category id {}",
                c.id
            )));
        }
    }
    let image_ids: HashSet<u64> = images.iter().map(|im| im.id).collect();
    let mut anns = Vec::with_capacity(annotations.len());
    for (i, a) in annotations.iter().enumerate() {
        if !image_ids.contains(&a.image_id) {
            return Err(Error::Integrity(format!(
                "annotations[{i}] (id {}) references unknown image_id {}",
                a.id, a.image_id
            )));
        }
        let [x, y, w, h] = a.bbox;
        if !(w >= 0.0 && h >= 0.0) || !(x.is_finite() && y.is_finite()) {
            return Err(Error::Parse {
                record: format!("annotations[{i}]"),
                message: format!("invalid bbox {:?}", a.bbox),
            });
        }
        anns.push(Annotation {
            image_id: a.image_id,
            class_id: a.category_id,
            bbox: BoundingBox::from_xywh(x, y, w, h),
        });
    }
    let mut index = DatasetIndex {
        images: images
            .into_iter()
            .map(|im| ImageRecord {
                id: im.id,
                source: ImageSource::File(base.join(&im.file_name)),
                width: im.width,
                height: im.height,
            })
            .collect(),
        annotations: anns,
        classes: categories
            .into_iter()
            .map(|c| ClassInfo { id: c.id, name: c.name })
            .collect(),
    };
    index.canonicalize_classes()?;
    index.validate()?;
    Ok(index)
}

/// Writes images and annotations back out in the same COCO subset.
pub fn write_coco_subset(
    path: &Path,
    images: &[ImageRecord],
    annotations: &[Annotation],
    classes: &[ClassInfo],
) -> Result<()> {
    let images: Vec<CocoImage> = images
        .iter()
        .map(|im| CocoImage {
            id: im.id,
            file_name: match &im.source {
                ImageSource::File(p) => p.display().to_string(),
                ImageSource::Synthetic(_) => format!("synthetic/{:06}.png", im.id),
            },
            width: im.width,
            height: im.height,
        })
        .collect();
    let annotations: Vec<CocoAnnotation> = annotations
        .iter()
        .enumerate()
        .map(|(i, a)| CocoAnnotation {
            id: i as u64 + 1,
            image_id: a.image_id,
            category_id: a.class_id,
            bbox: [a.bbox.x1, a.bbox.y1, a.bbox.width(), a.bbox.height()],
        })
        .collect();
    let categories: Vec<CocoCategory> = classes
        .iter()
        .map(|c| CocoCategory {
            id: c.id,
            name: c.name.clone(),
        })
        .collect();
    let doc = serde_json::json!({
        "images": images,
        "annotations": annotations,
        "categories": categories,
    });
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}
