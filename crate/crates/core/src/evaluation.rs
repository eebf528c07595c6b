//! Detection, discovery and tracking metrics.
//!
//! AP follows the PASCAL all-points protocol. U-Recall counts one-to-one
//! matches so that one large box cannot cover several unknowns. Clustering
//! quality runs seeded k-means++ and scores it with NMI (arithmetic
//! normalisation) and purity.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, CostMatrix, FORBIDDEN};
use crate::detector::{l2_normalize, DenseOutput, Detector, Instance, Label};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::synthdata::{Roster, Scene, Split};

pub const AP_PROTOCOL: &str = "pascal-voc-all-points";
const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 100;

/// A ground-truth object as the evaluator sees it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub category: u32,
    /// Detector class index for known categories.
    pub class: Option<usize>,
    pub split: Split,
}

/// Predictions and ground truth for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    /// Sorted by objectness, highest first.
    pub predictions: Vec<Instance>,
    pub ground_truth: Vec<GtObject>,
}

impl DetectionResult {
    pub fn new(mut predictions: Vec<Instance>, ground_truth: Vec<GtObject>) -> Self {
        sort_by_score(&mut predictions);
        Self {
            predictions,
            ground_truth,
        }
    }

    pub fn from_scene(predictions: Vec<Instance>, scene: &Scene, roster: &Roster) -> Self {
        let gt = scene
            .records
            .iter()
            .map(|r| GtObject {
                bbox: r.bbox,
                category: r.category,
                class: if r.split == Split::Known {
                    roster.class_index(r.category)
                } else {
                    None
                },
                split: r.split,
            })
            .collect();
        Self::new(predictions, gt)
    }
}

fn sort_by_score(preds: &mut [Instance]) {
    // stable, so equal scores keep their decode order
    preds.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
}

/// Runs `detector` over `scenes` in parallel; output order follows `scenes`.
pub fn detect_scenes(
    detector: &(dyn Detector + Sync),
    scenes: &[Scene],
    roster: &Roster,
) -> Result<Vec<DetectionResult>> {
    scenes
        .par_iter()
        .map(|s| {
            Ok(DetectionResult::from_scene(
                detector.detect(&s.image.to_float())?,
                s,
                roster,
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// Area under the precision envelope at every recall step.
fn all_points_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Per-class AP over known classes and their mean.
///
/// Predictions of class `k` across all images are visited in descending score
/// order (ties by image, then rank within the image). Each takes the unmatched
/// same-class ground truth box in its image with the highest IoU, if that IoU
/// reaches `iou_thresh`. Classes absent from the ground truth are left out of
/// the mean.
pub fn average_precision(
    results: &[DetectionResult],
    num_classes: usize,
    iou_thresh: f64,
) -> ApResult {
    let mut per_class = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let mut preds: Vec<(f64, usize, &BBox)> = Vec::new();
        let mut num_gt = 0;
        for (img, r) in results.iter().enumerate() {
            num_gt += r.ground_truth.iter().filter(|g| g.class == Some(k)).count();
            for p in &r.predictions {
                if p.label == Label::Known(k) {
                    preds.push((p.objectness, img, &p.bbox));
                }
            }
        }
        if num_gt == 0 {
            per_class.push(None);
            continue;
        }
        preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut used: Vec<Vec<bool>> = results
            .iter()
            .map(|r| vec![false; r.ground_truth.len()])
            .collect();
        let tp: Vec<bool> = preds
            .iter()
            .map(|&(_, img, b)| {
                let gts = &results[img].ground_truth;
                let best = best_unmatched(
                    b,
                    gts.iter().map(|g| (g.class == Some(k)).then_some(&g.bbox)),
                    &used[img],
                    iou_thresh,
                );
                if let Some(j) = best {
                    used[img][j] = true;
                }
                best.is_some()
            })
            .collect();
        per_class.push(Some(all_points_ap(&tp, num_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    ApResult { per_class, map }
}

/// Index of the highest-IoU eligible, unused box with IoU at least `thresh`.
/// The first index wins ties.
fn best_unmatched<'a>(
    b: &BBox,
    candidates: impl Iterator<Item = Option<&'a BBox>>,
    used: &[bool],
    thresh: f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in candidates.enumerate() {
        let Some(g) = g else { continue };
        if used[j] {
            continue;
        }
        let v = iou(b, g);
        if v >= thresh && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

/// Fraction of unknown ground-truth boxes recovered at `iou_thresh`.
///
/// Only predictions labelled unknown take part unless `all_predictions` is
/// set. Within each image, predictions in score order each claim the unused
/// unknown box with the highest IoU. Returns 0 when there are no unknown boxes.
pub fn unknown_recall(results: &[DetectionResult], iou_thresh: f64, all_predictions: bool) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for r in results {
        let unknown: Vec<Option<&BBox>> = r
            .ground_truth
            .iter()
            .map(|g| (g.split == Split::Unknown).then_some(&g.bbox))
            .collect();
        total += unknown.iter().flatten().count();
        let mut used = vec![false; unknown.len()];
        for p in r
            .predictions
            .iter()
            .filter(|p| all_predictions || p.label.is_unknown())
        {
            if let Some(j) = best_unmatched(&p.bbox, unknown.iter().copied(), &used, iou_thresh) {
                used[j] = true;
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub nmi: f64,
    pub purity: f64,
    pub assignments: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One k-means++ seeded Lloyd run. Returns (assignments, inertia).
fn kmeans_once(x: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = x.len();
    let mut centres: Vec<Vec<f64>> = vec![x[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centres.push(x[pick].clone());
        for (d, p) in d2.iter_mut().zip(x) {
            *d = d.min(sq_dist(p, &centres[centres.len() - 1]));
        }
    }
    let nearest = |p: &[f64], centres: &[Vec<f64>]| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (c, m) in centres.iter().enumerate() {
            let d = sq_dist(p, m);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    };
    let mut assign: Vec<usize> = x.iter().map(|p| nearest(p, &centres).0).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let dim = x[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in x.iter().zip(&assign) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            // empty clusters keep their previous centre
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = x.iter().map(|p| nearest(p, &centres).0).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let inertia = x
        .iter()
        .zip(&assign)
        .map(|(p, &a)| sq_dist(p, &centres[a]))
        .sum();
    (assign, inertia)
}

/// Best of [`KMEANS_RESTARTS`] k-means++ runs by inertia.
pub fn kmeans(x: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || x.len() < k {
        return Err(Error::DegenerateInput(format!(
            "{} points for {k} clusters",
            x.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (a, inertia) = kmeans_once(x, k, &mut rng);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((a, inertia));
        }
    }
    Ok(best.expect("at least one restart").0)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| c as f64 / n)
        .map(|p| -p * p.ln())
        .sum()
}

/// NMI with arithmetic-mean normalisation. Two single-cluster partitions
/// score 1; one single-cluster partition against a split one scores 0.
pub fn nmi<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let mut joint: BTreeMap<(A, B), usize> = BTreeMap::new();
    let mut ca: BTreeMap<A, usize> = BTreeMap::new();
    let mut cb: BTreeMap<B, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        mi += pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln();
    }
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

/// Fraction of points whose cluster's majority label matches their own.
pub fn purity<L: Ord + Copy>(clusters: &[usize], labels: &[L]) -> f64 {
    if clusters.is_empty() {
        return 0.0;
    }
    let mut table: BTreeMap<usize, BTreeMap<L, usize>> = BTreeMap::new();
    for (&c, &l) in clusters.iter().zip(labels) {
        *table.entry(c).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = table
        .values()
        .map(|m| m.values().copied().max().unwrap_or(0))
        .sum();
    majority as f64 / clusters.len() as f64
}

/// Clusters `embeddings` into `k` groups and scores them against `labels`.
///
/// Fails with `DegenerateInput` when there are fewer than `k` points or all
/// embeddings coincide; callers report NMI 0 in that case.
pub fn clustering_quality(
    embeddings: &[Vec<f64>],
    labels: &[u32],
    k: usize,
    seed: u64,
) -> Result<ClusterQuality> {
    if embeddings.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings, {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if embeddings.len() < k || k == 0 {
        return Err(Error::DegenerateInput(format!(
            "{} instances for k = {k}",
            embeddings.len()
        )));
    }
    if embeddings.iter().any(|e| e.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("embedding".into()));
    }
    if embeddings.iter().all(|e| e == &embeddings[0]) {
        return Err(Error::DegenerateInput(
            "all embeddings are identical".into(),
        ));
    }
    let assignments = kmeans(embeddings, k, seed)?;
    Ok(ClusterQuality {
        nmi: nmi(&assignments, labels),
        purity: purity(&assignments, labels),
        assignments,
    })
}

/// Unit embedding read at the cell containing each box centre.
pub fn embeddings_at_boxes(out: &DenseOutput, boxes: &[BBox]) -> Vec<Vec<f64>> {
    boxes
        .iter()
        .map(|b| {
            let (x, y) = b.center();
            let (r, c) = out.cell_at(x, y);
            l2_normalize(&out.embedding_at(r, c))
        })
        .collect()
}

/// Student embeddings at every unknown ground-truth box, with their hidden
/// category ids, in scene then record order.
pub fn unknown_embeddings(
    detector: &(dyn Detector + Sync),
    scenes: &[Scene],
) -> Result<(Vec<Vec<f64>>, Vec<u32>)> {
    let per_scene: Vec<(Vec<Vec<f64>>, Vec<u32>)> = scenes
        .par_iter()
        .map(|s| {
            let out = detector.dense(&s.image.to_float())?;
            let recs: Vec<_> = s.unknown_records().collect();
            let boxes: Vec<BBox> = recs.iter().map(|r| r.bbox).collect();
            Ok((
                embeddings_at_boxes(&out, &boxes),
                recs.iter().map(|r| r.category).collect(),
            ))
        })
        .collect::<Result<_>>()?;
    let mut e = Vec::new();
    let mut l = Vec::new();
    for (pe, pl) in per_scene {
        e.extend(pe);
        l.extend(pl);
    }
    Ok((e, l))
}

/// Evaluation knobs shared by the trainer and the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Count every prediction towards U-Recall, not only those labelled unknown.
    pub u_recall_all_predictions: bool,
    /// Cluster count for discovery; defaults to the number of unknown categories.
    pub discovery_k: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            u_recall_all_predictions: false,
            discovery_k: None,
        }
    }
}

/// AP and U-Recall fields of a report.
pub fn fill_detection_metrics(
    report: &mut MetricReport,
    detector: &(dyn Detector + Sync),
    scenes: &[Scene],
    roster: &Roster,
    cfg: &EvalConfig,
) -> Result<()> {
    let results = detect_scenes(detector, scenes, roster)?;
    let ap = average_precision(&results, roster.num_known(), cfg.iou_thresh);
    report.map = Some(ap.map);
    report.per_class_ap = ap.per_class;
    report.u_recall = Some(unknown_recall(
        &results,
        cfg.iou_thresh,
        cfg.u_recall_all_predictions,
    ));
    Ok(())
}

/// NMI and purity fields of a report. A degenerate embedding set scores 0.
pub fn fill_discovery_metrics(
    report: &mut MetricReport,
    detector: &(dyn Detector + Sync),
    scenes: &[Scene],
    roster: &Roster,
    cfg: &EvalConfig,
) -> Result<()> {
    let (e, l) = unknown_embeddings(detector, scenes)?;
    let k = cfg.discovery_k.unwrap_or_else(|| roster.num_unknown());
    match clustering_quality(&e, &l, k, report.seed) {
        Ok(q) => {
            report.unknown_nmi = Some(q.nmi);
            report.unknown_purity = Some(q.purity);
        }
        Err(Error::DegenerateInput(msg)) => {
            log::warn!("discovery degenerate: {msg}");
            report.unknown_nmi = Some(0.0);
            report.unknown_purity = None;
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

/// A box with an identity, for tracking metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackBox {
    pub id: u64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub id_switches: usize,
    pub idf1_like: f64,
    pub precision: f64,
    pub recall: f64,
    pub matches: usize,
    /// Matches consistent with the best global id mapping.
    pub id_matches: usize,
    pub num_gt: usize,
    pub num_pred: usize,
}

impl TrackingMetrics {
    /// Counts summed over sequences, rates recomputed from the sums.
    pub fn pooled(parts: &[TrackingMetrics]) -> TrackingMetrics {
        let mut m = TrackingMetrics::default();
        for p in parts {
            m.id_switches += p.id_switches;
            m.matches += p.matches;
            m.id_matches += p.id_matches;
            m.num_gt += p.num_gt;
            m.num_pred += p.num_pred;
        }
        m.finish();
        m
    }

    fn finish(&mut self) {
        let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
        self.idf1_like = ratio(2 * self.id_matches, self.num_gt + self.num_pred);
        self.precision = ratio(self.matches, self.num_pred);
        self.recall = ratio(self.matches, self.num_gt);
    }
}

pub const TRACK_MATCH_IOU: f64 = 0.5;

/// Frame-by-frame matching at IoU 0.5 with identity bookkeeping.
///
/// An id switch is counted when a ground-truth track is matched to a different
/// predicted id than at its previous matched frame. `idf1_like` is the F1 of
/// the best one-to-one mapping between ground-truth and predicted ids, where
/// each mapped pair earns one true positive per frame it was matched in.
pub fn tracking_metrics(pred: &[Vec<TrackBox>], gt: &[Vec<TrackBox>]) -> Result<TrackingMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted frames, {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let mut m = TrackingMetrics::default();
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    let mut co: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        m.num_gt += g.len();
        m.num_pred += p.len();
        let cost = CostMatrix::from_fn(g.len(), p.len(), |i, j| {
            let v = iou(&g[i].bbox, &p[j].bbox);
            if v >= TRACK_MATCH_IOU {
                1.0 - v
            } else {
                FORBIDDEN
            }
        });
        for (i, j) in hungarian(&cost) {
            let (gid, pid) = (g[i].id, p[j].id);
            m.matches += 1;
            *co.entry((gid, pid)).or_default() += 1;
            if let Some(prev) = last.insert(gid, pid) {
                if prev != pid {
                    m.id_switches += 1;
                }
            }
        }
    }
    let gids: Vec<u64> = co
        .keys()
        .map(|k| k.0)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let pids: Vec<u64> = co
        .keys()
        .map(|k| k.1)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let id_cost = CostMatrix::from_fn(gids.len(), pids.len(), |i, j| {
        co.get(&(gids[i], pids[j]))
            .map_or(FORBIDDEN, |&c| -(c as f64))
    });
    m.id_matches = hungarian(&id_cost)
        .iter()
        .map(|&(i, j)| co[&(gids[i], pids[j])])
        .sum();
    m.finish();
    Ok(m)
}

/// Everything one evaluation run reports. Missing sections were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ap_protocol: String,
    pub map: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    pub u_recall: Option<f64>,
    pub unknown_nmi: Option<f64>,
    pub unknown_purity: Option<f64>,
    pub tracking: Option<TrackingMetrics>,
    pub seed: u64,
    pub config: serde_json::Value,
}

pub const CSV_HEADER: &str = "run,seed,map,u_recall,unknown_nmi,unknown_purity,id_switches,idf1_like,track_precision,track_recall";

impl MetricReport {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        Self {
            ap_protocol: AP_PROTOCOL.into(),
            seed,
            config,
            ..Self::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
    }

    pub fn csv_row(&self, run: &str) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let t = self.tracking.as_ref();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            run.replace(',', "_"),
            self.seed,
            f(self.map),
            f(self.u_recall),
            f(self.unknown_nmi),
            f(self.unknown_purity),
            t.map_or(String::new(), |t| t.id_switches.to_string()),
            f(t.map(|t| t.idf1_like)),
            f(t.map(|t| t.precision)),
            f(t.map(|t| t.recall)),
        )
    }

    /// Appends one row to a sweep CSV, writing the header for a new file.
    pub fn append_csv(&self, path: &Path, run: &str) -> Result<()> {
        let fresh = !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(CSV_HEADER);
            text.push('\n');
        }
        text.push_str(&self.csv_row(run));
        text.push('\n');
        file.write_all(text.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}
