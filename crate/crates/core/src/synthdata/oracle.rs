use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    stream, AnnotationRecord, Roster, Scene, STREAM_PROTOTYPES, STREAM_SEGMENTER, STREAM_TEACHER,
};
use crate::embed_transfer::{Teacher, TeacherFeatureMap};
use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

/// Degradation knobs for the oracle segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    /// Positive values dilate each mask by this radius, negative values erode.
    pub radius: i32,
    /// Probability of dropping each mask.
    pub drop_prob: f64,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            radius: 0,
            drop_prob: 0.0,
            seed: 0,
        }
    }
}

/// Class-agnostic masks for every object of a scene.
///
/// Returns the ground-truth masks, optionally dilated or eroded and with each
/// mask independently dropped with probability `drop_prob`. Deterministic for
/// a given `(cfg.seed, image_id)`.
pub fn oracle_segmenter(
    records: &[AnnotationRecord],
    image_id: u64,
    cfg: &SegmenterConfig,
) -> Vec<BinaryMask> {
    let mut rng = stream(cfg.seed, STREAM_SEGMENTER, image_id);
    records
        .iter()
        .filter_map(|r| {
            // one draw per record regardless of outcome keeps streams aligned across drop rates
            let u: f64 = rng.random();
            if u < cfg.drop_prob {
                return None;
            }
            Some(match cfg.radius {
                0 => r.mask.clone(),
                k if k > 0 => r.mask.dilate(k as usize),
                k => r.mask.erode(k.unsigned_abs() as usize),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub dim: usize,
    pub stride: usize,
    /// Standard deviation of per-cell Gaussian noise.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            stride: 4,
            sigma: 0.05,
            seed: 0,
        }
    }
}

/// Stand-in for a frozen vision foundation model.
///
/// Each category owns a fixed unit prototype; the prototypes (one per category
/// plus one for background) are mutually orthonormal. A teacher cell whose
/// centre lies inside an object's box carries that object's category prototype
/// (later objects win where boxes overlap), every other cell the background
/// prototype, and every cell gets independent `N(0, sigma^2)` noise.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTeacher {
    pub config: TeacherConfig,
    roster: Roster,
    prototypes: Vec<Vec<f64>>,
}

/// Fixed key for the prototype stream; prototypes do not depend on the run seed.
const PROTOTYPE_KEY: u64 = 0x5EED_F00D;

impl OracleTeacher {
    pub fn new(roster: &Roster, config: TeacherConfig) -> Result<Self> {
        let n = roster.categories.len() + 1;
        if config.dim < n {
            return Err(Error::Config(format!(
                "teacher dim {} cannot hold {} orthonormal prototypes",
                config.dim, n
            )));
        }
        if config.stride == 0 || config.sigma < 0.0 {
            return Err(Error::Config(
                "teacher stride must be positive and sigma non-negative".into(),
            ));
        }
        let mut rng = stream(PROTOTYPE_KEY, STREAM_PROTOTYPES, config.dim as u64);
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(n);
        while prototypes.len() < n {
            let mut v: Vec<f64> = (0..config.dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            for p in &prototypes {
                let d: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(p).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            prototypes.push(v);
        }
        Ok(Self {
            config,
            roster: roster.clone(),
            prototypes,
        })
    }

    /// Prototype of a category id, or of the background for `None`.
    pub fn prototype(&self, category: Option<u32>) -> &[f64] {
        let idx = category
            .and_then(|c| self.roster.position(c))
            .unwrap_or(self.prototypes.len() - 1);
        &self.prototypes[idx]
    }

    pub fn feature_map(&self, scene: &Scene) -> TeacherFeatureMap {
        let s = self.config.stride;
        let (h, w) = (
            scene.image.height.div_ceil(s),
            scene.image.width.div_ceil(s),
        );
        let mut f = TeacherFeatureMap::zeros(h, w, self.config.dim, s);
        let mut rng = stream(self.config.seed, STREAM_TEACHER, scene.image_id);
        for r in 0..h {
            for c in 0..w {
                let (cx, cy) = ((c as f64 + 0.5) * s as f64, (r as f64 + 0.5) * s as f64);
                let owner = scene
                    .records
                    .iter()
                    .rev()
                    .find(|rec| rec.bbox.contains_point(cx, cy));
                let proto = self.prototype(owner.map(|o| o.category));
                let sigma = self.config.sigma;
                for (dst, p) in f.cell_mut(r, c).iter_mut().zip(proto) {
                    let z: f64 = rng.sample(StandardNormal);
                    *dst = p + sigma * z;
                }
            }
        }
        f
    }
}

impl Teacher for OracleTeacher {
    fn features(&self, scene: &Scene) -> Result<TeacherFeatureMap> {
        Ok(self.feature_map(scene))
    }
}
