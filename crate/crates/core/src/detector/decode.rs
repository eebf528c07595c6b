use super::{l2_normalize, sigmoid, softmax, DenseOutput, DetectorConfig, Instance, Label};
use crate::geometry::{nms, BBox};

/// Box predicted at a cell, clamped to the image.
pub fn cell_box(out: &DenseOutput, row: usize, col: usize) -> BBox {
    let (h, w) = out.image_dims();
    out.predicted_box(row, col).clamp(w as f64, h as f64)
}

/// Turns dense outputs into instances.
///
/// Cells with `sigmoid(objectness) >= score_thresh` are kept, capped at `topk` by
/// objectness, and passed through NMS. The label is the arg-max known category
/// when its softmax probability reaches `unknown_margin`, otherwise
/// [`Label::Unknown`].
pub fn decode(out: &DenseOutput, cfg: &DetectorConfig) -> Vec<Instance> {
    let (hf, wf) = out.grid();
    let mut cells: Vec<(usize, f64)> = (0..hf * wf)
        .map(|i| (i, sigmoid(out.objectness[[i / wf, i % wf]])))
        .filter(|&(_, p)| p >= cfg.score_thresh)
        .collect();
    cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cells.truncate(cfg.topk);

    let boxes: Vec<BBox> = cells
        .iter()
        .map(|&(i, _)| cell_box(out, i / wf, i % wf))
        .collect();
    let scores: Vec<f64> = cells.iter().map(|c| c.1).collect();
    nms(&boxes, &scores, cfg.nms_thresh)
        .into_iter()
        .map(|k| {
            let (i, p) = cells[k];
            let (r, c) = (i / wf, i % wf);
            let logits: Vec<f64> = out.cat_logits.slice(ndarray::s![r, c, ..]).to_vec();
            let probs = softmax(&logits);
            let (best, best_p) =
                probs
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (j, &q)| if q > acc.1 { (j, q) } else { acc },
                    );
            let label = if best_p >= cfg.unknown_margin {
                Label::Known(best)
            } else {
                Label::Unknown
            };
            Instance {
                bbox: boxes[k],
                objectness: p,
                label,
                embedding: l2_normalize(&out.embedding_at(r, c)),
                cell: Some(i),
            }
        })
        .collect()
}
