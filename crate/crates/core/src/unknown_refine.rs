//! Mask-supervised box regression for unknown objects.
//!
//! High-objectness predictions that do not overlap any known ground-truth box
//! are matched one-to-one against boxes derived from class-agnostic masks; the
//! matched mask boxes then serve as regression targets for those predictions.
//! Masks supervise localization only, never the category.

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, CostMatrix, FORBIDDEN};
use crate::detector::{DenseGrad, DenseOutput, Instance};
use crate::error::{Error, Result};
use crate::geometry::{giou_with_grad, iou, mask_to_box, BBox, BinaryMask};

/// Candidates overlapping a known gt box at or above this IoU are excluded.
pub const KNOWN_OVERLAP_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub tau_obj: f64,
    pub tau_iou: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub max_candidates: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            tau_obj: 0.3,
            tau_iou: 0.5,
            lambda_l1: 1.0,
            lambda_giou: 1.0,
            max_candidates: 20,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("tau_obj", self.tau_obj), ("tau_iou", self.tau_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("refine.{n}={v} outside [0, 1]")));
            }
        }
        if self.lambda_l1 < 0.0 || self.lambda_giou < 0.0 {
            return Err(Error::Config(
                "refine loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A candidate prediction paired with its mask-derived regression target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoPair {
    /// Index into the instance list the candidates were selected from.
    pub pred_index: usize,
    pub target_box: BBox,
    pub match_iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoTargets {
    pub pairs: Vec<PseudoPair>,
    /// Masks skipped because they had no foreground.
    pub dropped_empty: usize,
}

/// Indices of instances that may be unknown objects.
///
/// Keeps instances with objectness `>= tau_obj` whose IoU with every known gt
/// box is below [`KNOWN_OVERLAP_IOU`], ordered by objectness (descending, then
/// index) and truncated to `max_candidates`.
pub fn select_unknown_candidates(
    instances: &[Instance],
    known_gt: &[BBox],
    cfg: &RefineConfig,
) -> Vec<usize> {
    let mut idx: Vec<usize> = instances
        .iter()
        .enumerate()
        .filter(|(_, inst)| {
            inst.objectness >= cfg.tau_obj
                && known_gt
                    .iter()
                    .all(|g| iou(&inst.bbox, g) < KNOWN_OVERLAP_IOU)
        })
        .map(|(i, _)| i)
        .collect();
    idx.sort_by(|&a, &b| {
        instances[b]
            .objectness
            .total_cmp(&instances[a].objectness)
            .then(a.cmp(&b))
    });
    idx.truncate(cfg.max_candidates);
    idx
}

/// Matches candidates to mask boxes by optimal assignment on `1 - IoU`.
///
/// Pairs with IoU below `tau_iou` are forbidden, so each mask box supervises
/// at most one candidate and vice versa.
pub fn build_pseudo_targets(
    instances: &[Instance],
    candidates: &[usize],
    masks: &[BinaryMask],
    cfg: &RefineConfig,
) -> PseudoTargets {
    let mut dropped_empty = 0;
    let mask_boxes: Vec<BBox> = masks
        .iter()
        .filter_map(|m| match mask_to_box(m) {
            Ok(b) => Some(b),
            Err(_) => {
                dropped_empty += 1;
                None
            }
        })
        .collect();
    if dropped_empty > 0 {
        log::warn!("dropped {dropped_empty} empty mask(s)");
    }
    if candidates.is_empty() || mask_boxes.is_empty() {
        return PseudoTargets {
            pairs: Vec::new(),
            dropped_empty,
        };
    }
    let ious: Vec<Vec<f64>> = candidates
        .iter()
        .map(|&c| {
            mask_boxes
                .iter()
                .map(|m| iou(&instances[c].bbox, m))
                .collect()
        })
        .collect();
    let cost = CostMatrix::from_fn(candidates.len(), mask_boxes.len(), |r, k| {
        if ious[r][k] >= cfg.tau_iou && ious[r][k] > 0.0 {
            1.0 - ious[r][k]
        } else {
            FORBIDDEN
        }
    });
    let pairs = hungarian(&cost)
        .into_iter()
        .map(|(r, k)| PseudoPair {
            pred_index: candidates[r],
            target_box: mask_boxes[k],
            match_iou: ious[r][k],
        })
        .collect();
    PseudoTargets {
        pairs,
        dropped_empty,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineLoss {
    pub value: f64,
    /// Gradient with respect to each predicted box, aligned with the pairs.
    pub box_grads: Vec<[f64; 4]>,
}

/// Mean over pairs of `lambda_l1 * |pred - target|_1 / diag + lambda_giou * (1 - GIoU)`.
///
/// `predicted[k]` is the (unclamped) predicted box for `pairs[k]` and `diag`
/// the image diagonal in pixels.
pub fn refine_loss(
    pairs: &[PseudoPair],
    predicted: &[BBox],
    diag: f64,
    cfg: &RefineConfig,
) -> Result<RefineLoss> {
    if pairs.len() != predicted.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pairs but {} predicted boxes",
            pairs.len(),
            predicted.len()
        )));
    }
    if pairs.is_empty() {
        return Ok(RefineLoss {
            value: 0.0,
            box_grads: Vec::new(),
        });
    }
    let n = pairs.len() as f64;
    let mut value = 0.0;
    let mut box_grads = Vec::with_capacity(pairs.len());
    for (pair, pred) in pairs.iter().zip(predicted) {
        let p = pred.to_array();
        let t = pair.target_box.to_array();
        let mut g = [0.0; 4];
        let mut l1 = 0.0;
        for k in 0..4 {
            let d = p[k] - t[k];
            l1 += d.abs();
            if d != 0.0 {
                g[k] += cfg.lambda_l1 * d.signum() / (diag * n);
            }
        }
        let (gi, dgi) = giou_with_grad(pred, &pair.target_box);
        for k in 0..4 {
            g[k] -= cfg.lambda_giou * dgi[k] / n;
        }
        value += cfg.lambda_l1 * l1 / diag + cfg.lambda_giou * (1.0 - gi);
        box_grads.push(g);
    }
    let value = value / n;
    if !value.is_finite() || box_grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("refine loss".into()));
    }
    Ok(RefineLoss { value, box_grads })
}

/// [`refine_loss`] on dense outputs: boxes are read from the cells that
/// produced each paired instance, and the gradient lands on those cells' box
/// offsets only.
pub fn refine_loss_dense(
    pairs: &[PseudoPair],
    instances: &[Instance],
    out: &DenseOutput,
    cfg: &RefineConfig,
) -> Result<(f64, DenseGrad)> {
    let (_, wf) = out.grid();
    let cells: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| {
            let cell = instances
                .get(p.pred_index)
                .and_then(|i| i.cell)
                .ok_or_else(|| {
                    Error::ShapeMismatch(format!("pair {} has no source cell", p.pred_index))
                })?;
            Ok((cell / wf, cell % wf))
        })
        .collect::<Result<_>>()?;
    let predicted: Vec<BBox> = cells
        .iter()
        .map(|&(r, c)| out.predicted_box(r, c))
        .collect();
    let (h, w) = out.image_dims();
    let diag = ((h * h + w * w) as f64).sqrt();
    let loss = refine_loss(pairs, &predicted, diag, cfg)?;
    let mut grad = DenseGrad::zeros_like(out);
    let sign = [-1.0, -1.0, 1.0, 1.0];
    for (&(r, c), g) in cells.iter().zip(&loss.box_grads) {
        for k in 0..4 {
            grad.box_offsets[[r, c, k]] += sign[k] * g[k];
        }
    }
    Ok((loss.value, grad))
}
