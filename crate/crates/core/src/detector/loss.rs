use super::{sigmoid, softmax, DenseGrad, DenseOutput, TargetMap};
use crate::error::{Error, Result};
use crate::geometry::giou_with_grad;

/// Value and dense gradient of the supervised detection objective.
#[derive(Clone, Debug)]
pub struct DetectionLoss {
    pub objectness: f64,
    pub category: f64,
    pub bbox: f64,
    pub total: f64,
    pub grad: DenseGrad,
}

/// Supervised loss over known categories.
///
/// * objectness: binary cross-entropy over every cell, mean-reduced;
/// * category: cross-entropy over positive cells, mean-reduced;
/// * box: `L1 / stride` (averaged over the four sides) plus `1 - GIoU`, over
///   positive cells, mean-reduced.
pub fn detection_loss(out: &DenseOutput, targets: &TargetMap) -> Result<DetectionLoss> {
    let (hf, wf) = out.grid();
    if targets.grid != (hf, wf) {
        return Err(Error::ShapeMismatch(format!(
            "targets for grid {:?} applied to outputs of grid {:?}",
            targets.grid,
            (hf, wf)
        )));
    }
    let mut grad = DenseGrad::zeros_like(out);
    let n_cells = (hf * wf) as f64;
    let s = out.stride as f64;

    let mut obj = 0.0;
    for r in 0..hf {
        for c in 0..wf {
            let z = out.objectness[[r, c]];
            let y = if targets.get(r, c).is_some() {
                1.0
            } else {
                0.0
            };
            obj += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            grad.objectness[[r, c]] = (sigmoid(z) - y) / n_cells;
        }
    }
    obj /= n_cells;

    let n_pos = targets.num_positive();
    let mut cat = 0.0;
    let mut bbox = 0.0;
    if n_pos > 0 {
        let np = n_pos as f64;
        for (r, c, t) in targets.positives() {
            let logits: Vec<f64> = out.cat_logits.slice(ndarray::s![r, c, ..]).to_vec();
            let probs = softmax(&logits);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            cat += lse - logits[t.class];
            for (k, &p) in probs.iter().enumerate() {
                let y = if k == t.class { 1.0 } else { 0.0 };
                grad.cat_logits[[r, c, k]] = (p - y) / np;
            }

            let mut l1 = 0.0;
            for k in 0..4 {
                let d = out.box_offsets[[r, c, k]] - t.offsets[k];
                l1 += d.abs() / (4.0 * s);
                grad.box_offsets[[r, c, k]] +=
                    d.signum() * (d != 0.0) as u8 as f64 / (4.0 * s * np);
            }
            let pred = out.predicted_box(r, c);
            let (g, dg) = giou_with_grad(&pred, &t.gt_box);
            // box = (cx - l, cy - t, cx + r, cy + b); loss term is -giou
            let sign = [-1.0, -1.0, 1.0, 1.0];
            for k in 0..4 {
                grad.box_offsets[[r, c, k]] -= sign[k] * dg[k] / np;
            }
            bbox += l1 + (1.0 - g);
        }
        cat /= np;
        bbox /= np;
    }

    for (name, v) in [
        ("objectness loss", obj),
        ("category loss", cat),
        ("box loss", bbox),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(DetectionLoss {
        objectness: obj,
        category: cat,
        bbox,
        total: obj + cat + bbox,
        grad,
    })
}
