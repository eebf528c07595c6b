use rand::Rng;

use super::render::{paint_background, paint_object, place_mask, Appearance};
use super::scene::place_objects;
use super::{stream, AnnotationRecord, RgbImage, Scene, SceneSpec, Split, STREAM_SEQUENCE};
use crate::error::{Error, Result};
use crate::geometry::{mask_to_box, BBox, BinaryMask};

/// Constant-velocity motion of an object's top-left corner inside `[0, range]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub range_x: f64,
    pub range_y: f64,
}

impl Motion {
    /// Advances one frame, reflecting off `0` and `range`.
    pub fn step(&mut self) {
        fn axis(p: &mut f64, v: &mut f64, range: f64) {
            let mut n = *p + *v;
            if n < 0.0 {
                n = -n;
                *v = -*v;
            } else if n > range {
                n = 2.0 * range - n;
                *v = -*v;
            }
            *p = n;
        }
        axis(&mut self.x, &mut self.vx, self.range_x);
        axis(&mut self.y, &mut self.vy, self.range_y);
    }
}

/// Closed-form position after `t` frames of reflected motion on `[0, range]`.
pub fn reflect_position(p0: f64, v: f64, t: usize, range: f64) -> f64 {
    if range <= 0.0 {
        return 0.0;
    }
    let y = (p0 + v * t as f64).rem_euclid(2.0 * range);
    if y > range {
        2.0 * range - y
    } else {
        y
    }
}

/// Default per-axis speed bound in pixels per frame.
pub const DEFAULT_MAX_SPEED: f64 = 2.0;

/// `length` frames of objects moving with constant velocity and bouncing at
/// the borders. Each track keeps its category and colour; categories are
/// distinct within a sequence. Track ids are `0..n`.
pub fn generate_sequence(seed: u64, spec: &SceneSpec, length: usize) -> Result<Vec<Scene>> {
    generate_sequence_with_speed(seed, spec, length, DEFAULT_MAX_SPEED)
}

/// [`generate_sequence`] with an explicit speed bound. Velocities are
/// multiples of 0.25 px/frame so positions stay exact in binary floating point.
pub fn generate_sequence_with_speed(
    seed: u64,
    spec: &SceneSpec,
    length: usize,
    max_speed: f64,
) -> Result<Vec<Scene>> {
    if length == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let mut tracks = plan_sequence(seed, spec, max_speed)?;
    let mut frames = Vec::with_capacity(length);
    for t in 0..length {
        let mut frame_rng = stream(seed, STREAM_SEQUENCE, 1 + t as u64);
        let mut image = RgbImage::new(spec.height, spec.width);
        paint_background(&mut image, &mut frame_rng);
        let mut records = Vec::with_capacity(tracks.len());
        for (k, tr) in tracks.iter_mut().enumerate() {
            let (x0, y0) = (tr.motion.x.floor() as usize, tr.motion.y.floor() as usize);
            paint_object(
                &mut image,
                &tr.local_mask,
                x0,
                y0,
                &tr.appearance,
                &mut frame_rng,
            );
            records.push(AnnotationRecord {
                bbox: tr.local_box.translate(x0 as f64, y0 as f64),
                category: tr.category,
                split: tr.split,
                mask: place_mask(&tr.local_mask, x0, y0, spec.height, spec.width),
                track_id: Some(k as u64),
            });
            tr.motion.step();
        }
        frames.push(Scene {
            image_id: t as u64,
            image,
            records,
            frame: Some((seed, t)),
        });
    }
    Ok(frames)
}

/// Initial state of one sequence track.
#[derive(Clone, Debug)]
pub struct TrackPlan {
    pub category: u32,
    pub split: Split,
    pub local_mask: BinaryMask,
    /// Mask box relative to the moving top-left corner.
    pub local_box: BBox,
    pub motion: Motion,
    pub(crate) appearance: Appearance,
}

/// Samples the tracks of sequence `seed`: distinct categories, initial
/// positions under the overlap cap, appearance, and velocity.
pub fn plan_sequence(seed: u64, spec: &SceneSpec, max_speed: f64) -> Result<Vec<TrackPlan>> {
    spec.validate()?;
    let mut rng = stream(seed, STREAM_SEQUENCE, 0);
    let max_n = spec.max_instances.min(spec.roster.categories.len());
    let n = rng.random_range(spec.min_instances.min(max_n)..=max_n);
    let placed = place_objects(spec, n, true, &mut rng)?;
    let quarters = (max_speed * 4.0).floor() as i64;
    let mut tracks = Vec::with_capacity(placed.len());
    for p in placed {
        let cat = &spec.roster.categories[p.category];
        let appearance = Appearance::sample(cat, &mut rng);
        let local_box = mask_to_box(&p.local_mask)?;
        let motion = Motion {
            x: p.x0 as f64,
            y: p.y0 as f64,
            vx: rng.random_range(-quarters..=quarters) as f64 * 0.25,
            vy: rng.random_range(-quarters..=quarters) as f64 * 0.25,
            range_x: (spec.width - p.local_mask.width()) as f64,
            range_y: (spec.height - p.local_mask.height()) as f64,
        };
        tracks.push(TrackPlan {
            category: cat.id,
            split: cat.split,
            local_mask: p.local_mask,
            local_box,
            motion,
            appearance,
        });
    }
    Ok(tracks)
}
