//! Relational embedding transfer.
//!
//! The teacher's pairwise instance similarities are distilled into the
//! student's embedding head. Only similarity structure is matched, so teacher
//! and student embedding widths may differ.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{DenseOutput, Instance};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synthdata::Scene;

/// Dense features from a frozen teacher, `height x width x dim`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherFeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Image pixels per teacher cell.
    pub stride: usize,
    pub data: Vec<f64>,
}

impl TeacherFeatureMap {
    pub fn zeros(height: usize, width: usize, dim: usize, stride: usize) -> Self {
        Self {
            height,
            width,
            dim,
            stride,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.height * self.width * self.dim || self.stride == 0 {
            return Err(Error::ShapeMismatch(format!(
                "teacher map {}x{}x{} holds {} values",
                self.height,
                self.width,
                self.dim,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("teacher features".into()));
        }
        Ok(())
    }
}

/// Source of teacher features for a scene.
pub trait Teacher {
    fn features(&self, scene: &Scene) -> Result<TeacherFeatureMap>;
}

/// Reads precomputed feature maps stored as `<dir>/<image_id>.json`.
#[derive(Clone, Debug)]
pub struct OfflineTeacher {
    pub dir: PathBuf,
}

impl OfflineTeacher {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, image_id: u64) -> PathBuf {
        self.dir.join(format!("{image_id}.json"))
    }

    pub fn store(&self, image_id: u64, map: &TeacherFeatureMap) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path_for(image_id);
        let text = serde_json::to_string(map).expect("feature map serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<TeacherFeatureMap> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: TeacherFeatureMap =
            serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))?;
        map.validate()
            .map_err(|e| Error::schema(path, e.to_string()))?;
        Ok(map)
    }
}

impl Teacher for OfflineTeacher {
    fn features(&self, scene: &Scene) -> Result<TeacherFeatureMap> {
        Self::load(&self.path_for(scene.image_id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    RowKl,
    MatrixMse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub temperature: f64,
    pub loss_kind: LossKind,
    pub min_instances: usize,
    /// Build one similarity matrix over the whole batch instead of one per image.
    pub cross_batch: bool,
    /// Objectness floor for unknown candidates entering the matrices; the
    /// refine module's `tau_obj` when absent.
    pub candidate_tau_obj: Option<f64>,
    /// Also feed segmenter mask boxes that do not overlap known boxes.
    pub mask_proposals: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            loss_kind: LossKind::RowKl,
            min_instances: 2,
            cross_batch: false,
            candidate_tau_obj: None,
            mask_proposals: false,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(
                "transfer.temperature must be positive".into(),
            ));
        }
        if self
            .candidate_tau_obj
            .is_some_and(|t| !(0.0..=1.0).contains(&t))
        {
            return Err(Error::Config(
                "transfer.candidate_tau_obj outside [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityRole {
    Teacher,
    Student,
}

/// Symmetric `n x n` matrix of pairwise cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub role: SimilarityRole,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Averages teacher features over each box footprint and L2-normalizes.
///
/// The footprint is the set of teacher cells whose centres fall inside the box;
/// boxes that cover no cell centre use the cell nearest to the box centre.
pub fn roi_pool_teacher(f: &TeacherFeatureMap, boxes: &[BBox]) -> Vec<Vec<f64>> {
    let s = f.stride as f64;
    boxes
        .iter()
        .map(|b| {
            let mut acc = vec![0.0; f.dim];
            let mut count = 0usize;
            // cell centre (c + 0.5) * s lies in [x1, x2)  <=>  c in [x1/s - 0.5, x2/s - 0.5)
            let c0 = (b.x1 / s - 0.5).ceil().max(0.0) as usize;
            let r0 = (b.y1 / s - 0.5).ceil().max(0.0) as usize;
            for r in r0..f.height {
                let cy = (r as f64 + 0.5) * s;
                if cy >= b.y2 {
                    break;
                }
                for c in c0..f.width {
                    let cx = (c as f64 + 0.5) * s;
                    if cx >= b.x2 {
                        break;
                    }
                    if b.contains_point(cx, cy) {
                        acc.iter_mut().zip(f.cell(r, c)).for_each(|(a, v)| *a += v);
                        count += 1;
                    }
                }
            }
            if count == 0 {
                let (bx, by) = b.center();
                let c = ((bx / s).floor().max(0.0) as usize).min(f.width - 1);
                let r = ((by / s).floor().max(0.0) as usize).min(f.height - 1);
                acc.copy_from_slice(f.cell(r, c));
            }
            normalize(&mut acc);
            acc
        })
        .collect()
}

/// Pairwise dot products; the upper triangle is computed and mirrored.
pub fn similarity_matrix(e: &[Vec<f64>], role: SimilarityRole) -> SimilarityMatrix {
    let n = e.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d: f64 = e[i].iter().zip(&e[j]).map(|(a, b)| a * b).sum();
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    SimilarityMatrix { n, role, data }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferLoss {
    pub value: f64,
    /// `n x n` gradient with respect to the student matrix entries.
    pub grad: Vec<f64>,
}

fn off_diag_softmax(m: &SimilarityMatrix, i: usize, tau: f64) -> Vec<f64> {
    let n = m.n;
    let mx = (0..n)
        .filter(|&j| j != i)
        .map(|j| m.get(i, j) / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = (0..n)
        .map(|j| {
            if j == i {
                0.0
            } else {
                (m.get(i, j) / tau - mx).exp()
            }
        })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Distance between teacher and student similarity structure.
///
/// * `RowKl`: for every row, softmax over the off-diagonal entries divided by
///   the temperature for both matrices; the loss is the mean over rows of
///   `KL(teacher_row || student_row)`.
/// * `MatrixMse`: mean squared difference over off-diagonal entries.
///
/// Returns zero when fewer than `min_instances` instances are present.
pub fn transfer_loss(
    t: &SimilarityMatrix,
    s: &SimilarityMatrix,
    cfg: &TransferConfig,
) -> Result<TransferLoss> {
    if t.n != s.n {
        return Err(Error::ShapeMismatch(format!(
            "teacher {} vs student {} instances",
            t.n, s.n
        )));
    }
    let n = t.n;
    let mut grad = vec![0.0; n * n];
    if n < cfg.min_instances.max(2) {
        return Ok(TransferLoss { value: 0.0, grad });
    }
    let mut value = 0.0;
    match cfg.loss_kind {
        LossKind::RowKl => {
            let tau = cfg.temperature;
            for i in 0..n {
                let p = off_diag_softmax(t, i, tau);
                let q = off_diag_softmax(s, i, tau);
                for j in 0..n {
                    if j == i || p[j] == 0.0 {
                        continue;
                    }
                    value += p[j] * (p[j].ln() - q[j].max(f64::MIN_POSITIVE).ln());
                }
                for j in 0..n {
                    if j != i {
                        grad[i * n + j] = (q[j] - p[j]) / (tau * n as f64);
                    }
                }
            }
            value /= n as f64;
        }
        LossKind::MatrixMse => {
            let m = (n * (n - 1)) as f64;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let d = s.get(i, j) - t.get(i, j);
                        value += d * d / m;
                        grad[i * n + j] = 2.0 * d / m;
                    }
                }
            }
        }
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("transfer loss".into()));
    }
    Ok(TransferLoss {
        value: value.max(0.0),
        grad,
    })
}

/// [`transfer_loss`] with the gradient chained back to raw (unnormalized)
/// student embeddings. The teacher matrix receives no gradient.
pub fn transfer_loss_embeddings(
    teacher: &SimilarityMatrix,
    raw: &[Vec<f64>],
    cfg: &TransferConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let norms: Vec<f64> = raw
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if norms.iter().any(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::NonFinite("student embedding norm".into()));
    }
    let unit: Vec<Vec<f64>> = raw
        .iter()
        .zip(&norms)
        .map(|(v, n)| v.iter().map(|x| x / n).collect())
        .collect();
    let s = similarity_matrix(&unit, SimilarityRole::Student);
    let loss = transfer_loss(teacher, &s, cfg)?;
    let n = raw.len();
    let d = raw.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0; d]; n];
    for i in 0..n {
        // dL/du_i = sum_j (G_ij + G_ji) u_j
        let mut gu = vec![0.0; d];
        for j in 0..n {
            let w = loss.grad[i * n + j] + loss.grad[j * n + i];
            if w != 0.0 {
                gu.iter_mut().zip(&unit[j]).for_each(|(g, u)| *g += w * u);
            }
        }
        let dot: f64 = gu.iter().zip(&unit[i]).map(|(g, u)| g * u).sum();
        for k in 0..d {
            grads[i][k] = (gu[k] - dot * unit[i][k]) / norms[i];
        }
    }
    Ok((loss.value, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceSource {
    KnownGt,
    UnknownCandidate,
    MaskProposal,
}

/// A box entering the similarity matrices, with the student cell read for it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferInstance {
    pub bbox: BBox,
    pub cell: (usize, usize),
    pub source: InstanceSource,
}

/// Known gt boxes followed by the selected unknown candidates.
///
/// The student embedding for each box is read at the cell containing the box
/// centre.
pub fn collect_transfer_instances(
    known_gt: &[BBox],
    decoded: &[Instance],
    candidates: &[usize],
    out: &DenseOutput,
) -> Vec<TransferInstance> {
    let at = |b: &BBox| {
        let (x, y) = b.center();
        out.cell_at(x, y)
    };
    known_gt
        .iter()
        .map(|b| TransferInstance {
            bbox: *b,
            cell: at(b),
            source: InstanceSource::KnownGt,
        })
        .chain(candidates.iter().map(|&i| {
            let b = decoded[i].bbox;
            TransferInstance {
                bbox: b,
                cell: at(&b),
                source: InstanceSource::UnknownCandidate,
            }
        }))
        .collect()
}
