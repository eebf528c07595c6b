use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::render::{paint_background, paint_object, place_mask, render_shape_mask, Appearance};
use super::{stream, AnnotationRecord, RgbImage, Scene, SceneSpec, STREAM_SCENE};
use crate::error::{Error, Result};
use crate::geometry::{iou, mask_to_box, BBox, BinaryMask};

const MAX_ATTEMPTS: usize = 1000;

/// An object chosen by the placement sampler, before painting.
#[derive(Clone, Debug)]
pub(crate) struct Placement {
    pub category: usize,
    pub local_mask: BinaryMask,
    pub x0: usize,
    pub y0: usize,
    pub bbox: BBox,
}

/// Rejection-samples `n` objects under the pairwise IoU cap.
///
/// `distinct` forbids repeating a category.
pub(crate) fn place_objects(
    spec: &SceneSpec,
    n: usize,
    distinct: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Placement>> {
    let n_cat = spec.roster.categories.len();
    if distinct && n > n_cat {
        return Err(Error::PlacementFailure {
            wanted: n,
            attempts: 0,
        });
    }
    let mut placed: Vec<Placement> = Vec::with_capacity(n);
    let mut attempts = 0;
    while placed.len() < n {
        if attempts >= MAX_ATTEMPTS {
            return Err(Error::PlacementFailure {
                wanted: n,
                attempts,
            });
        }
        attempts += 1;
        let category = rng.random_range(0..n_cat);
        let (lo, hi) = spec.size_range(category);
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let x0 = rng.random_range(0..=spec.width - w);
        let y0 = rng.random_range(0..=spec.height - h);
        if distinct && placed.iter().any(|p| p.category == category) {
            continue;
        }
        let local_mask = render_shape_mask(spec.roster.categories[category].shape, w, h);
        let bbox = mask_to_box(&local_mask)?.translate(x0 as f64, y0 as f64);
        if placed
            .iter()
            .all(|p| iou(&p.bbox, &bbox) <= spec.max_pair_iou)
        {
            placed.push(Placement {
                category,
                local_mask,
                x0,
                y0,
                bbox,
            });
        }
    }
    Ok(placed)
}

/// Scene `index` of the family keyed by `seed`.
pub fn generate_scene_indexed(seed: u64, index: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = stream(seed, STREAM_SCENE, index);
    let n = rng.random_range(spec.min_instances..=spec.max_instances);
    let placed = place_objects(spec, n, false, &mut rng)?;

    let mut image = RgbImage::new(spec.height, spec.width);
    paint_background(&mut image, &mut rng);
    let mut records = Vec::with_capacity(placed.len());
    for p in placed {
        let cat = &spec.roster.categories[p.category];
        let app = Appearance::sample(cat, &mut rng);
        paint_object(&mut image, &p.local_mask, p.x0, p.y0, &app, &mut rng);
        let mask = place_mask(&p.local_mask, p.x0, p.y0, spec.height, spec.width);
        records.push(AnnotationRecord {
            bbox: p.bbox,
            category: cat.id,
            split: cat.split,
            mask,
            track_id: None,
        });
    }
    Ok(Scene {
        image_id: index,
        image,
        records,
        frame: None,
    })
}

/// A single scene fully determined by `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    generate_scene_indexed(seed, 0, spec)
}

/// Scenes `first..first + count` of the family keyed by `seed`, generated in parallel.
pub fn generate_scenes(
    seed: u64,
    first: u64,
    count: usize,
    spec: &SceneSpec,
) -> Result<Vec<Scene>> {
    (first..first + count as u64)
        .into_par_iter()
        .map(|i| generate_scene_indexed(seed, i, spec))
        .collect()
}
