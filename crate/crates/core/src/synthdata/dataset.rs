//! COCO-style dataset files.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! annotations.json
//! images/<image_id:06>.png          8-bit RGB
//! masks/<image_id:06>_<k:02>.png    8-bit greyscale, 0 or 255, one per annotation
//! ```
//!
//! `annotations.json` holds `images`, `annotations` (with `bbox` as
//! `[x, y, w, h]`), `categories` (each with its `split`), and an optional
//! `tracks` list for sequence datasets.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, CategorySpec, RgbImage, Roster, Scene, Split};
use crate::error::{Error, Result};
use crate::geometry::{mask_to_box, BBox, BinaryMask};

pub const ANNOTATION_FILE: &str = "annotations.json";
const FORMAT: &str = "owd-coco";
const FORMAT_VERSION: u32 = 1;

/// Scenes plus the roster that labels them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub roster: Roster,
    pub scenes: Vec<Scene>,
}

#[derive(Serialize, Deserialize)]
struct Info {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sequence_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_index: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationEntry {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
    split: Split,
    mask_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    track_id: Option<u64>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord)]
struct TrackEntry {
    sequence_id: u64,
    track_id: u64,
    category_id: u32,
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    info: Info,
    images: Vec<ImageEntry>,
    annotations: Vec<AnnotationEntry>,
    categories: Vec<CategorySpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tracks: Vec<TrackEntry>,
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| Error::schema(path, format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::schema(path, "png too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::schema(path, format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::schema(path, "expected 8-bit png"));
    }
    buf.truncate(info.buffer_size());
    Ok((
        info.width as usize,
        info.height as usize,
        info.color_type,
        buf,
    ))
}

/// Writes `dataset` under `dir`, creating it if needed. Existing files with
/// the same names are overwritten.
pub fn serialize_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.roster.validate()?;
    let mut seen = HashSet::new();
    for s in &dataset.scenes {
        if !seen.insert(s.image_id) {
            return Err(Error::schema(
                dir,
                format!("duplicate image id {}", s.image_id),
            ));
        }
    }
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut tracks = BTreeMap::new();
    let mut ann_id = 0u64;
    for scene in &dataset.scenes {
        let file_name = format!("images/{:06}.png", scene.image_id);
        let img = &scene.image;
        write_png(
            &dir.join(&file_name),
            img.width,
            img.height,
            png::ColorType::Rgb,
            &img.data,
        )?;
        images.push(ImageEntry {
            id: scene.image_id,
            file_name,
            width: img.width,
            height: img.height,
            sequence_id: scene.frame.map(|f| f.0),
            frame_index: scene.frame.map(|f| f.1),
        });
        for (k, rec) in scene.records.iter().enumerate() {
            let mask_file = format!("masks/{:06}_{:02}.png", scene.image_id, k);
            let bytes: Vec<u8> = rec
                .mask
                .cells()
                .iter()
                .map(|&c| if c { 255 } else { 0 })
                .collect();
            write_png(
                &dir.join(&mask_file),
                rec.mask.width(),
                rec.mask.height(),
                png::ColorType::Grayscale,
                &bytes,
            )?;
            if let (Some((seq, _)), Some(t)) = (scene.frame, rec.track_id) {
                tracks.insert((seq, t), rec.category);
            }
            annotations.push(AnnotationEntry {
                id: ann_id,
                image_id: scene.image_id,
                category_id: rec.category,
                bbox: rec.bbox.to_xywh(),
                area: rec.mask.count() as f64,
                iscrowd: 0,
                split: rec.split,
                mask_file,
                track_id: rec.track_id,
            });
            ann_id += 1;
        }
    }
    let file = CocoFile {
        info: Info {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
        },
        images,
        annotations,
        categories: dataset.roster.categories.clone(),
        tracks: tracks
            .into_iter()
            .map(|((sequence_id, track_id), category_id)| TrackEntry {
                sequence_id,
                track_id,
                category_id,
            })
            .collect(),
    };
    let path = dir.join(ANNOTATION_FILE);
    let text = serde_json::to_string_pretty(&file).expect("annotations serialize");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads and validates a dataset written by [`serialize_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: CocoFile =
        serde_json::from_str(&text).map_err(|e| Error::schema(&path, e.to_string()))?;
    if file.info.format != FORMAT || file.info.version != FORMAT_VERSION {
        return Err(Error::schema(
            &path,
            format!(
                "unsupported format {} v{}",
                file.info.format, file.info.version
            ),
        ));
    }
    let roster = Roster {
        categories: file.categories,
    };
    roster
        .validate()
        .map_err(|e| Error::schema(&path, e.to_string()))?;

    let mut scenes: Vec<Scene> = Vec::with_capacity(file.images.len());
    let mut index = BTreeMap::new();
    for entry in &file.images {
        if index.insert(entry.id, scenes.len()).is_some() {
            return Err(Error::schema(
                &path,
                format!("duplicate image id {}", entry.id),
            ));
        }
        let img_path = dir.join(&entry.file_name);
        let (w, h, color, data) = read_png(&img_path)?;
        if color != png::ColorType::Rgb || (w, h) != (entry.width, entry.height) {
            return Err(Error::schema(&img_path, "image does not match its entry"));
        }
        let frame = match (entry.sequence_id, entry.frame_index) {
            (Some(s), Some(f)) => Some((s, f)),
            (None, None) => None,
            _ => {
                return Err(Error::schema(
                    &path,
                    format!("image {} has partial sequence info", entry.id),
                ))
            }
        };
        scenes.push(Scene {
            image_id: entry.id,
            image: RgbImage {
                height: h,
                width: w,
                data,
            },
            records: Vec::new(),
            frame,
        });
    }

    for ann in &file.annotations {
        let Some(cat) = roster.get(ann.category_id) else {
            return Err(Error::schema(
                &path,
                format!(
                    "annotation {} has category {} outside the roster",
                    ann.id, ann.category_id
                ),
            ));
        };
        if cat.split != ann.split {
            return Err(Error::schema(
                &path,
                format!("annotation {} split disagrees with its category", ann.id),
            ));
        }
        let Some(&si) = index.get(&ann.image_id) else {
            return Err(Error::schema(
                &path,
                format!(
                    "annotation {} references missing image {}",
                    ann.id, ann.image_id
                ),
            ));
        };
        let mask_path: PathBuf = dir.join(&ann.mask_file);
        let (w, h, color, data) = read_png(&mask_path)?;
        let scene = &mut scenes[si];
        if color != png::ColorType::Grayscale || (w, h) != (scene.image.width, scene.image.height) {
            return Err(Error::schema(&mask_path, "mask does not match its image"));
        }
        let mask = BinaryMask::from_cells(h, w, data.iter().map(|&v| v > 127).collect())?;
        let bbox = BBox::from_xywh(ann.bbox);
        if mask_to_box(&mask).ok() != Some(bbox) {
            return Err(Error::schema(
                &path,
                format!("annotation {} bbox disagrees with its mask", ann.id),
            ));
        }
        scene.records.push(AnnotationRecord {
            bbox,
            category: ann.category_id,
            split: ann.split,
            mask,
            track_id: ann.track_id,
        });
    }
    Ok(Dataset { roster, scenes })
}
