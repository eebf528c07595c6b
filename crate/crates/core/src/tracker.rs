//! Tracking by detection with appearance-first association.
//!
//! Each frame's detections are matched to live tracks by the Hungarian
//! algorithm on `1 - cosine(track embedding, detection embedding)`. IoU only
//! gates which pairs may match; there is no motion model.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, CostMatrix, FORBIDDEN};
use crate::detector::{Detector, Instance, Label};
use crate::embed_transfer::{roi_pool_teacher, Teacher};
use crate::error::{Error, Result};
use crate::evaluation::TrackBox;
use crate::geometry::{iou, BBox};
use crate::synthdata::{
    generate_sequence_with_speed, Roster, Scene, SceneSpec, Split, DEFAULT_MAX_SPEED,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Minimum cosine similarity for a match. Values above 1 disable association.
    pub sim_thresh: f64,
    /// Minimum IoU for a match; 0 disables gating.
    pub iou_gate: f64,
    pub max_misses: usize,
    /// Weight of the previous embedding in the EMA update.
    pub ema_alpha: f64,
    /// Minimum objectness for an unmatched detection to start a track.
    pub birth_score: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            sim_thresh: 0.6,
            iou_gate: 0.1,
            max_misses: 3,
            ema_alpha: 0.9,
            birth_score: 0.5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sim_thresh.is_finite() && self.sim_thresh >= 0.0) {
            return Err(Error::Config(
                "sim_thresh must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.iou_gate) || !(0.0..=1.0).contains(&self.birth_score) {
            return Err(Error::Config(
                "iou_gate and birth_score must lie in [0, 1]".into(),
            ));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::Config("ema_alpha must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// The evaluation sequences used by the command line and the benchmarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub sequences: usize,
    pub length: usize,
    /// Sequence `i` is generated from seed `seed + i`, independent of the run seed.
    pub seed: u64,
    pub max_speed: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            sequences: 20,
            length: 30,
            seed: 0,
            max_speed: DEFAULT_MAX_SPEED,
        }
    }
}

impl TrackingConfig {
    pub fn generate(&self, spec: &SceneSpec) -> Result<Vec<Vec<Scene>>> {
        (0..self.sequences as u64)
            .into_par_iter()
            .map(|i| generate_sequence_with_speed(self.seed + i, spec, self.length, self.max_speed))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u64,
    /// Box of the last matched detection.
    pub bbox: BBox,
    /// Unit-norm EMA of matched embeddings.
    pub embedding: Vec<f64>,
    /// Frames since birth.
    pub age: usize,
    /// Consecutive unmatched frames.
    pub misses: usize,
    pub label: Label,
    /// Objectness of the last matched detection.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub track_id: u64,
    pub bbox: BBox,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BirthEntry {
    pub track_id: u64,
    pub bbox: BBox,
}

/// What happened to every track and detection in one frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub frame: usize,
    pub matched: Vec<MatchEntry>,
    pub born: Vec<BirthEntry>,
    /// Tracks left unmatched this frame that are still alive.
    pub missed: Vec<u64>,
    pub died: Vec<u64>,
    /// Unmatched detections below the birth score.
    pub discarded: usize,
}

/// Stateful tracker for one sequence.
#[derive(Clone, Debug)]
pub struct Tracker {
    config: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u64,
    frame: usize,
}

/// Deterministic order on detections so association does not depend on input order.
fn canonical_cmp(a: &Instance, b: &Instance) -> Ordering {
    b.objectness
        .total_cmp(&a.objectness)
        .then_with(|| {
            a.bbox
                .to_array()
                .iter()
                .zip(b.bbox.to_array().iter())
                .fold(Ordering::Equal, |o, (x, y)| o.then(x.total_cmp(y)))
        })
        .then_with(|| {
            a.embedding
                .iter()
                .zip(&b.embedding)
                .fold(Ordering::Equal, |o, (x, y)| o.then(x.total_cmp(y)))
        })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        d += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na.sqrt() * nb.sqrt())
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            tracks: Vec::new(),
            next_id: 0,
            frame: 0,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Live tracks in birth order.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Association cost matrix between live tracks (rows) and detections (columns).
    pub fn cost_matrix(&self, dets: &[Instance]) -> CostMatrix {
        let cfg = &self.config;
        CostMatrix::from_fn(self.tracks.len(), dets.len(), |i, j| {
            let (t, d) = (&self.tracks[i], &dets[j]);
            let sim = cosine(&t.embedding, &d.embedding);
            if sim < cfg.sim_thresh || iou(&t.bbox, &d.bbox) < cfg.iou_gate {
                FORBIDDEN
            } else {
                1.0 - sim
            }
        })
    }

    /// Advances one frame.
    pub fn step(&mut self, detections: &[Instance]) -> FrameLog {
        let mut dets = detections.to_vec();
        dets.sort_by(canonical_cmp);
        for t in &mut self.tracks {
            t.age += 1;
        }
        let cost = self.cost_matrix(&dets);
        let pairs = hungarian(&cost);
        let mut log = FrameLog {
            frame: self.frame,
            ..FrameLog::default()
        };
        let mut track_hit = vec![false; self.tracks.len()];
        let mut det_used = vec![false; dets.len()];
        let alpha = self.config.ema_alpha;
        for &(i, j) in &pairs {
            track_hit[i] = true;
            det_used[j] = true;
            let (t, d) = (&mut self.tracks[i], &dets[j]);
            let mixed: Vec<f64> = t
                .embedding
                .iter()
                .zip(&d.embedding)
                .map(|(o, n)| alpha * o + (1.0 - alpha) * n)
                .collect();
            t.embedding = normalized(&mixed);
            t.bbox = d.bbox;
            t.misses = 0;
            t.label = d.label;
            t.score = d.objectness;
            log.matched.push(MatchEntry {
                track_id: t.id,
                bbox: d.bbox,
                cost: cost.get(i, j),
            });
        }
        let max_misses = self.config.max_misses;
        let mut alive = Vec::with_capacity(self.tracks.len());
        for (t, hit) in std::mem::take(&mut self.tracks).into_iter().zip(track_hit) {
            if hit {
                alive.push(t);
                continue;
            }
            let mut t = t;
            t.misses += 1;
            if t.misses > max_misses {
                log.died.push(t.id);
            } else {
                log.missed.push(t.id);
                alive.push(t);
            }
        }
        self.tracks = alive;
        for (d, used) in dets.iter().zip(det_used) {
            if used {
                continue;
            }
            if d.objectness < self.config.birth_score {
                log.discarded += 1;
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            self.tracks.push(Track {
                id,
                bbox: d.bbox,
                embedding: normalized(&d.embedding),
                age: 0,
                misses: 0,
                label: d.label,
                score: d.objectness,
            });
            log.born.push(BirthEntry {
                track_id: id,
                bbox: d.bbox,
            });
        }
        log.matched.sort_by_key(|m| m.track_id);
        self.frame += 1;
        log
    }

    /// Tracks updated in the current frame (matched or born), in id order.
    fn reported(&self) -> Vec<&Track> {
        let mut v: Vec<&Track> = self.tracks.iter().filter(|t| t.misses == 0).collect();
        v.sort_by_key(|t| t.id);
        v
    }
}

/// One row of the track output file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRow {
    pub frame: usize,
    pub track_id: u64,
    pub bbox: BBox,
    pub label: Label,
    pub score: f64,
}

pub const MOT_HEADER: &str = "frame,track_id,x,y,w,h,label,score";

/// Output of a tracking run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRun {
    pub rows: Vec<TrackRow>,
    pub log: Vec<FrameLog>,
    pub num_frames: usize,
    /// Live tracks after the last frame.
    pub final_tracks: Vec<Track>,
}

impl TrackRun {
    /// Reported boxes grouped by frame, for [`crate::evaluation::tracking_metrics`].
    pub fn track_boxes(&self) -> Vec<Vec<TrackBox>> {
        let mut out = vec![Vec::new(); self.num_frames];
        for r in &self.rows {
            out[r.frame].push(TrackBox {
                id: r.track_id,
                bbox: r.bbox,
            });
        }
        out
    }

    pub fn to_mot(&self) -> String {
        let mut s = String::from(MOT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let [x, y, w, h] = r.bbox.to_xywh();
            let _ = writeln!(
                s,
                "{},{},{x},{y},{w},{h},{},{}",
                r.frame, r.track_id, r.label, r.score
            );
        }
        s
    }

    pub fn save_mot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_mot()).map_err(|e| Error::io(path, e))
    }

    pub fn save_log(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&self.log).expect("frame logs serialize");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Reads a track output file written by [`TrackRun::save_mot`].
pub fn load_mot(path: &Path) -> Result<Vec<TrackRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mot(&text, path)
}

/// Parses track output text; `origin` names the source in errors.
pub fn parse_mot(text: &str, origin: &Path) -> Result<Vec<TrackRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MOT_HEADER) {
        return Err(Error::schema(
            origin,
            format!("expected header `{MOT_HEADER}`"),
        ));
    }
    let bad = |n: usize, what: &str| Error::schema(origin, format!("line {}: {what}", n + 2));
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(n, "expected 8 fields"));
            }
            let num = |k: usize| {
                f[k].trim()
                    .parse::<f64>()
                    .map_err(|_| bad(n, "invalid number"))
            };
            let label = match f[6].trim() {
                "unknown" => Label::Unknown,
                k => Label::Known(k.parse().map_err(|_| bad(n, "invalid label"))?),
            };
            Ok(TrackRow {
                frame: f[0].trim().parse().map_err(|_| bad(n, "invalid frame"))?,
                track_id: f[1]
                    .trim()
                    .parse()
                    .map_err(|_| bad(n, "invalid track id"))?,
                bbox: BBox::from_xywh([num(2)?, num(3)?, num(4)?, num(5)?]),
                label,
                score: num(7)?,
            })
        })
        .collect()
}

/// Tracks precomputed per-frame detections.
pub fn run_detections(frames: &[Vec<Instance>], cfg: &TrackerConfig) -> Result<TrackRun> {
    let mut tracker = Tracker::new(cfg.clone())?;
    let mut rows = Vec::new();
    let mut log = Vec::with_capacity(frames.len());
    for (f, dets) in frames.iter().enumerate() {
        log.push(tracker.step(dets));
        rows.extend(tracker.reported().into_iter().map(|t| TrackRow {
            frame: f,
            track_id: t.id,
            bbox: t.bbox,
            label: t.label,
            score: t.score,
        }));
    }
    Ok(TrackRun {
        rows,
        log,
        num_frames: frames.len(),
        final_tracks: tracker.tracks,
    })
}

/// Detects every frame, then tracks sequentially.
pub fn run(
    frames: &[Scene],
    detector: &(dyn Detector + Sync),
    cfg: &TrackerConfig,
) -> Result<TrackRun> {
    cfg.validate()?;
    let dets: Vec<Vec<Instance>> = frames
        .par_iter()
        .map(|s| detector.detect(&s.image.to_float()))
        .collect::<Result<_>>()?;
    run_detections(&dets, cfg)
}

/// Ground-truth boxes as detections carrying pooled teacher embeddings.
///
/// Each instance is pooled from a teacher map of its scene with the other
/// instances removed, so moving objects that pass over one another keep clean
/// embeddings. This is the perfect-input case for the tracker.
pub fn oracle_detections(
    frames: &[Scene],
    teacher: &(dyn Teacher + Sync),
    roster: &Roster,
) -> Result<Vec<Vec<Instance>>> {
    frames
        .par_iter()
        .map(|s| {
            s.records
                .iter()
                .map(|r| {
                    let alone = Scene {
                        records: vec![r.clone()],
                        ..s.clone()
                    };
                    let embedding =
                        roi_pool_teacher(&teacher.features(&alone)?, &[r.bbox]).remove(0);
                    Ok(Instance {
                        bbox: r.bbox,
                        objectness: 1.0,
                        label: match (r.split, roster.class_index(r.category)) {
                            (Split::Known, Some(c)) => Label::Known(c),
                            _ => Label::Unknown,
                        },
                        embedding,
                        cell: None,
                    })
                })
                .collect()
        })
        .collect()
}

/// Ground-truth track boxes of a generated sequence.
pub fn gt_track_boxes(frames: &[Scene]) -> Vec<Vec<TrackBox>> {
    frames
        .iter()
        .map(|s| {
            s.records
                .iter()
                .filter_map(|r| r.track_id.map(|id| TrackBox { id, bbox: r.bbox }))
                .collect()
        })
        .collect()
}
