//! Deterministic synthetic scenes and the oracle segmenter and teacher that
//! stand in for real foundation models.
//!
//! All randomness comes from ChaCha8 streams keyed by `(seed, purpose, index)`,
//! so scenes can be generated in any order or in parallel with identical bytes.

mod dataset;
mod oracle;
mod render;
mod scene;
mod sequence;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{load_dataset, serialize_dataset, Dataset, ANNOTATION_FILE};
pub use oracle::{oracle_segmenter, OracleTeacher, SegmenterConfig, TeacherConfig};
pub use render::{hsv_to_rgb, render_shape_mask};
pub use scene::{generate_scene, generate_scene_indexed, generate_scenes};
pub use sequence::{
    generate_sequence, generate_sequence_with_speed, plan_sequence, reflect_position, Motion,
    TrackPlan, DEFAULT_MAX_SPEED,
};

use crate::detector::Image;
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Known,
    Unknown,
}

/// HSV sampling range for a category's colour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorFamily {
    pub name: String,
    /// Hue centre in degrees.
    pub hue: f64,
    pub hue_jitter: f64,
    pub saturation: (f64, f64),
    pub value: (f64, f64),
}

impl ColorFamily {
    pub fn named(name: &str, hue: f64) -> Self {
        Self {
            name: name.into(),
            hue,
            hue_jitter: 12.0,
            saturation: (0.6, 1.0),
            value: (0.65, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: u32,
    pub name: String,
    pub shape: ShapeKind,
    pub color: ColorFamily,
    pub textured: bool,
    pub split: Split,
    /// Side-length range overriding the scene-wide one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<(usize, usize)>,
}

/// The category list. Known categories map to detector classes in roster order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roster {
    pub categories: Vec<CategorySpec>,
}

impl Default for Roster {
    /// Four known and four unknown categories. Every unknown category shares its
    /// shape with one known category and its colour with another, and the
    /// unknown categories pair up by colour. Unknown objects are drawn larger
    /// than known ones so their extent cannot be read off the known classes.
    fn default() -> Self {
        let red = || ColorFamily::named("red", 0.0);
        let green = || ColorFamily::named("green", 120.0);
        let blue = || ColorFamily::named("blue", 230.0);
        let yellow = || ColorFamily::named("yellow", 55.0);
        let cat = |id, name: &str, shape, color, textured, split| CategorySpec {
            id,
            name: name.into(),
            shape,
            color,
            textured,
            split,
            size: (split == Split::Unknown).then_some(UNKNOWN_SIZE),
        };
        use ShapeKind::*;
        use Split::*;
        Self {
            categories: vec![
                cat(0, "red-disc", Disc, red(), false, Known),
                cat(1, "green-square", Square, green(), false, Known),
                cat(2, "blue-triangle", Triangle, blue(), true, Known),
                cat(3, "yellow-ring", Ring, yellow(), false, Known),
                cat(4, "green-disc", Disc, green(), true, Unknown),
                cat(5, "green-triangle", Triangle, green(), false, Unknown),
                cat(6, "red-square", Square, red(), false, Unknown),
                cat(7, "red-ring", Ring, red(), true, Unknown),
            ],
        }
    }
}

impl Roster {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Config("roster is empty".into()));
        }
        for (i, a) in self.categories.iter().enumerate() {
            for b in &self.categories[i + 1..] {
                if a.id == b.id {
                    return Err(Error::Config(format!("duplicate category id {}", a.id)));
                }
                if a.shape == b.shape && a.color.name == b.color.name {
                    return Err(Error::Config(format!(
                        "categories {} and {} share shape and colour family",
                        a.id, b.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&CategorySpec> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.categories.iter().position(|c| c.id == id)
    }

    pub fn known(&self) -> impl Iterator<Item = &CategorySpec> {
        self.categories.iter().filter(|c| c.split == Split::Known)
    }

    pub fn unknown(&self) -> impl Iterator<Item = &CategorySpec> {
        self.categories.iter().filter(|c| c.split == Split::Unknown)
    }

    pub fn num_known(&self) -> usize {
        self.known().count()
    }

    pub fn num_unknown(&self) -> usize {
        self.unknown().count()
    }

    /// Detector class index of a known category.
    pub fn class_index(&self, id: u32) -> Option<usize> {
        self.known().position(|c| c.id == id)
    }

    /// Category id of a detector class index.
    pub fn class_category(&self, class: usize) -> Option<u32> {
        self.known().nth(class).map(|c| c.id)
    }
}

/// Side-length range of the default roster's unknown categories.
pub const UNKNOWN_SIZE: (usize, usize) = (28, 34);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Cap on IoU between any two placed objects.
    pub max_pair_iou: f64,
    /// Object side lengths are drawn from `[min_size, max_size]` pixels.
    pub min_size: usize,
    pub max_size: usize,
    pub roster: Roster,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_instances: 2,
            max_instances: 6,
            max_pair_iou: 0.2,
            min_size: 16,
            max_size: 24,
            roster: Roster::default(),
        }
    }
}

impl SceneSpec {
    /// Side-length range for the category at roster position `pos`.
    pub fn size_range(&self, pos: usize) -> (usize, usize) {
        self.roster.categories[pos]
            .size
            .unwrap_or((self.min_size, self.max_size))
    }

    pub fn validate(&self) -> Result<()> {
        self.roster.validate()?;
        if self.min_instances > self.max_instances {
            return Err(Error::Config("min_instances exceeds max_instances".into()));
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return Err(Error::Config("object size range is invalid".into()));
        }
        if self.max_size > self.height || self.max_size > self.width {
            return Err(Error::Config("objects larger than the image".into()));
        }
        for c in &self.roster.categories {
            if let Some((lo, hi)) = c.size {
                if lo < 2 || lo > hi || hi > self.height || hi > self.width {
                    return Err(Error::Config(format!(
                        "size range of category {} is invalid",
                        c.id
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.max_pair_iou) {
            return Err(Error::Config("max_pair_iou outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `H x W x 3` array with values in `[0, 1]`.
    pub fn to_float(&self) -> Image {
        Image::from_shape_fn((self.height, self.width, 3), |(r, c, k)| {
            self.data[(r * self.width + c) * 3 + k] as f64 / 255.0
        })
    }
}

/// Ground truth for one object.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub bbox: BBox,
    pub category: u32,
    pub split: Split,
    pub mask: BinaryMask,
    pub track_id: Option<u64>,
}

/// An image with its annotations. Records are listed in drawing order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub image: RgbImage,
    pub records: Vec<AnnotationRecord>,
    /// `(sequence id, frame index)` for sequence frames.
    pub frame: Option<(u64, usize)>,
}

impl Scene {
    /// Known-category boxes with their detector class indices.
    pub fn known_gt(&self, roster: &Roster) -> Vec<(BBox, usize)> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Known)
            .filter_map(|r| roster.class_index(r.category).map(|c| (r.bbox, c)))
            .collect()
    }

    pub fn known_boxes(&self) -> Vec<BBox> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Known)
            .map(|r| r.bbox)
            .collect()
    }

    pub fn unknown_records(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.iter().filter(|r| r.split == Split::Unknown)
    }
}

const STREAM_SCENE: u64 = 1;
const STREAM_SEGMENTER: u64 = 2;
const STREAM_TEACHER: u64 = 3;
const STREAM_SEQUENCE: u64 = 4;
const STREAM_PROTOTYPES: u64 = 5;

/// Independent ChaCha8 stream for `(seed, purpose, index)`.
pub(crate) fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}
