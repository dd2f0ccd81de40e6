//! Confusable-shapes generator: class `k` is a regular polygon with `k + 2` vertices.
//!
//! Neighbouring classes share overlapping radius and hue ranges, so adjacent
//! vertex counts are hard to tell apart at small sizes.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Annotation, ClassInfo, DatasetIndex, ImageRecord, ImageSource};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::scalar::Scalar;
use crate::tensor::Grid;

/// Parameter ranges of one synthetic class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeFamily {
    pub vertices: u32,
    /// Circumradius range in pixels.
    pub radius: (f64, f64),
    /// Hue range in turns, `[0, 1)`.
    pub hue: (f64, f64),
    /// Rotation is drawn from `[0, rotation_jitter)` radians.
    pub rotation_jitter: f64,
    /// Brightness jitter around 0.85.
    pub value_jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: u32,
    pub image_count: usize,
    /// Inclusive range of instances per image.
    pub instances_per_image: (usize, usize),
    pub seed: u64,
    /// All instances of an image share one class.
    #[serde(default)]
    pub single_class_images: bool,
    pub background: [f64; 3],
    pub families: Vec<ShapeFamily>,
}

impl SyntheticSpec {
    /// Default confusable layout for `num_classes` polygons on square images.
    pub fn confusable(num_classes: usize, image_size: u32, image_count: usize, seed: u64) -> Self {
        let s = image_size as f64;
        let k = num_classes.max(1) as f64;
        let spacing = 0.8 / k;
        let families = (0..num_classes)
            .map(|i| {
                let fi = i as f64;
                let centre = 0.05 + spacing * (fi + 0.5);
                ShapeFamily {
                    vertices: i as u32 + 3,
                    radius: (s * (0.13 + 0.01 * fi), s * (0.22 + 0.01 * fi)),
                    hue: (centre - 0.65 * spacing, centre + 0.65 * spacing),
                    rotation_jitter: TAU,
                    value_jitter: 0.1,
                }
            })
            .collect();
        SyntheticSpec {
            image_size,
            image_count,
            instances_per_image: (1, 3),
            seed,
            single_class_images: false,
            background: [0.15, 0.15, 0.15],
            families,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.families.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.len() < 2 {
            return Err(Error::config("synthetic datasets need at least 2 classes"));
        }
        let (lo, hi) = self.instances_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!(
                "instances_per_image range ({lo}, {hi}) is empty or starts at 0"
            )));
        }
        if self.image_size < 8 {
            return Err(Error::config("image_size must be at least 8"));
        }
        for (i, f) in self.families.iter().enumerate() {
            if f.vertices < 3 {
                return Err(Error::config(format!("class {} has fewer than 3 vertices", i + 1)));
            }
            if !(f.radius.0 > 0.0 && f.radius.0 <= f.radius.1) || !(f.hue.0 <= f.hue.1) {
                return Err(Error::config(format!("class {} has an empty range", i + 1)));
            }
            if 2.0 * f.radius.1 + 2.0 >= self.image_size as f64 {
                return Err(Error::config(format!(
                    "class {} radius does not fit in the image",
                    i + 1
                )));
            }
        }
        for (i, w) in self.families.windows(2).enumerate() {
            let overlap = |a: (f64, f64), b: (f64, f64)| a.0.max(b.0) < a.1.min(b.1);
            if !overlap(w[0].radius, w[1].radius) || !overlap(w[0].hue, w[1].hue) {
                return Err(Error::config(format!(
                    "classes {} and {} must have overlapping radius and hue ranges",
                    i + 1,
                    i + 2
                )));
            }
        }
        Ok(())
    }

    /// Class names sort in vertex order: `polygon_03`, `polygon_04`, ...
    pub fn class_name(&self, i: usize) -> String {
        format!("polygon_{:02}", self.families[i].vertices)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub class_id: u32,
    pub vertices: u32,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub rotation: f64,
    pub color: [f64; 3],
}

impl ShapeInstance {
    fn polygon(&self) -> Vec<(f64, f64)> {
        (0..self.vertices)
            .map(|i| {
                let a = self.rotation + TAU * i as f64 / self.vertices as f64;
                (self.cx + self.radius * a.cos(), self.cy + self.radius * a.sin())
            })
            .collect()
    }

    /// Whether the point lies strictly inside the (convex, counter-clockwise) polygon.
    fn contains(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
        (0..poly.len()).all(|i| {
            let (ax, ay) = poly[i];
            let (bx, by) = poly[(i + 1) % poly.len()];
            (bx - ax) * (py - ay) - (by - ay) * (px - ax) > 0.0
        })
    }

    /// Tight box around the pixels this shape paints.
    fn footprint(&self, width: u32, height: u32) -> Option<BoundingBox<f64>> {
        let poly = self.polygon();
        let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0, 0);
        let mut any = false;
        for y in 0..height {
            for x in 0..width {
                if Self::contains(&poly, x as f64 + 0.5, y as f64 + 0.5) {
                    any = true;
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        any.then(|| BoundingBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
    }
}

/// Everything needed to re-render one synthetic image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecipe {
    pub background: [f64; 3],
    pub instances: Vec<ShapeInstance>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-image random stream derived from `(seed, image_id)`.
pub(crate) fn image_rng(seed: u64, image_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(image_id)))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn boxes_touch(a: &BoundingBox<f64>, b: &BoundingBox<f64>, margin: f64) -> bool {
    a.x1 - margin < b.x2 && b.x1 - margin < a.x2 && a.y1 - margin < b.y2 && b.y1 - margin < a.y2
}

/// Deterministically generates a dataset index whose image sources are render recipes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetIndex> {
    spec.validate()?;
    let size = spec.image_size;
    let s = size as f64;
    let k = spec.num_classes();
    let mut images = Vec::with_capacity(spec.image_count);
    let mut annotations = Vec::new();
    for i in 0..spec.image_count {
        let id = i as u64 + 1;
        let mut rng = image_rng(spec.seed, id);
        let (lo, hi) = spec.instances_per_image;
        let count = rng.random_range(lo..=hi);
        let image_class = rng.random_range(0..k);
        let mut instances: Vec<ShapeInstance> = Vec::new();
        let mut boxes: Vec<BoundingBox<f64>> = Vec::new();
        for _ in 0..count {
            let ci = if spec.single_class_images {
                image_class
            } else {
                rng.random_range(0..k)
            };
            let fam = &spec.families[ci];
            for _attempt in 0..100 {
                let radius = rng.random_range(fam.radius.0..=fam.radius.1);
                let cx = rng.random_range(radius + 1.0..=s - radius - 1.0);
                let cy = rng.random_range(radius + 1.0..=s - radius - 1.0);
                let rotation = rng.random_range(0.0..fam.rotation_jitter.max(f64::MIN_POSITIVE));
                let hue = rng.random_range(fam.hue.0..=fam.hue.1);
                let value = 0.85 + rng.random_range(-fam.value_jitter..=fam.value_jitter);
                let inst = ShapeInstance {
                    class_id: ci as u32 + 1,
                    vertices: fam.vertices,
                    cx,
                    cy,
                    radius,
                    rotation,
                    color: hsv_to_rgb(hue, 0.75, value.clamp(0.3, 1.0)),
                };
                let Some(bbox) = inst.footprint(size, size) else {
                    continue;
                };
                if boxes.iter().any(|b| boxes_touch(b, &bbox, 1.0)) {
                    continue;
                }
                annotations.push(Annotation {
                    image_id: id,
                    class_id: inst.class_id,
                    bbox,
                });
                boxes.push(bbox);
                instances.push(inst);
                break;
            }
        }
        images.push(ImageRecord {
            id,
            source: ImageSource::Synthetic(SyntheticRecipe {
                background: spec.background,
                instances,
            }),
            width: size,
            height: size,
        });
    }
    let classes = (0..k)
        .map(|i| ClassInfo {
            id: i as u32 + 1,
            name: spec.class_name(i),
        })
        .collect();
    let index = DatasetIndex {
        images,
        annotations,
        classes,
    };
    index.validate()?;
    Ok(index)
}

/// Paints a recipe; channel values in `[0, 1]`.
pub fn rasterize<T: Scalar>(recipe: &SyntheticRecipe, width: u32, height: u32) -> Grid<T> {
    let (w, h) = (width as usize, height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h {
        data.extend(recipe.background.iter().map(|&v| T::of(v)));
    }
    for inst in &recipe.instances {
        let poly = inst.polygon();
        let r = inst.radius.ceil() as i64 + 1;
        let (cx, cy) = (inst.cx as i64, inst.cy as i64);
        for y in (cy - r).max(0)..(cy + r + 1).min(h as i64) {
            for x in (cx - r).max(0)..(cx + r + 1).min(w as i64) {
                if ShapeInstance::contains(&poly, x as f64 + 0.5, y as f64 + 0.5) {
                    let o = (y as usize * w + x as usize) * 3;
                    for c in 0..3 {
                        data[o + c] = T::of(inst.color[c]);
                    }
                }
            }
        }
    }
    Grid { h, w, c: 3, data }
}

/// Loads an image at `size x size`, returning the pixels and the `(x, y)` scale
/// factors to apply to its annotation boxes.
pub fn load_image<T: Scalar>(record: &ImageRecord, size: u32) -> Result<(Grid<T>, f64, f64)> {
    match &record.source {
        ImageSource::Synthetic(recipe) => {
            if record.width != size || record.height != size {
                return Err(Error::config(format!(
                    "synthetic image {} is {}x{}, detector expects {size}x{size}",
                    record.id, record.width, record.height
                )));
            }
            Ok((rasterize(recipe, size, size), 1.0, 1.0))
        }
        ImageSource::File(path) => {
            let img = image::open(path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
                .to_rgb32f();
            let (w0, h0) = img.dimensions();
            let resized =
                image::imageops::resize(&img, size, size, image::imageops::FilterType::Triangle);
            let data = resized.as_raw().iter().map(|&v| T::of(v as f64)).collect();
            let grid = Grid::from_vec(size as usize, size as usize, 3, data)?;
            Ok((grid, size as f64 / w0 as f64, size as f64 / h0 as f64))
        }
    }
}
