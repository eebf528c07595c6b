//! Compact single-scale dense detector.
//!
//! Every cell of the stride-`s` output grid predicts an objectness logit,
//! logits over the `K` known categories, four non-negative distances to the box
//! edges measured from the cell centre, and a `D`-dimensional embedding.

mod checkpoint;
mod decode;
mod loss;
mod network;
mod targets;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use decode::{cell_box, decode};
pub use loss::{detection_loss, DetectionLoss};
pub use network::{ForwardCache, Network, Params, Tensor};
pub use targets::{assign_targets, CellTarget, TargetMap};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Category assigned to a decoded instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Known(usize),
    Unknown,
}

impl Label {
    pub fn is_unknown(&self) -> bool {
        matches!(self, Label::Unknown)
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Known(k) => write!(f, "{k}"),
            Label::Unknown => write!(f, "unknown"),
        }
    }
}

/// One detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BBox,
    /// Sigmoid objectness in `[0, 1]`.
    pub objectness: f64,
    pub label: Label,
    /// Unit-norm embedding.
    pub embedding: Vec<f64>,
    /// Flat index `row * grid_width + col` of the producing cell, if any.
    pub cell: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub stride: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    /// Backbone widths. The first `log2(stride)` layers downsample by 2.
    pub channels: Vec<usize>,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub topk: usize,
    /// Minimum softmax probability of the arg-max class for a known label.
    pub unknown_margin: f64,
    /// Initial objectness probability encoded in the head bias.
    pub prior_prob: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            num_classes: 4,
            embed_dim: 32,
            channels: vec![16, 32, 32, 32],
            score_thresh: 0.05,
            nms_thresh: 0.5,
            topk: 50,
            unknown_margin: 0.5,
            prior_prob: 0.01,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || !self.stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "stride {} must be a power of two",
                self.stride
            )));
        }
        let downsamples = self.stride.trailing_zeros() as usize;
        if self.channels.len() < downsamples.max(1) {
            return Err(Error::Config(format!(
                "stride {} needs at least {} backbone layers",
                self.stride, downsamples
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        for (name, v) in [
            ("score_thresh", self.score_thresh),
            ("nms_thresh", self.nms_thresh),
            ("unknown_margin", self.unknown_margin),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name}={v} outside [0, 1]")));
            }
        }
        if !(0.0 < self.prior_prob && self.prior_prob < 1.0) {
            return Err(Error::Config("prior_prob must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn grid_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height == 0
            || width == 0
            || !height.is_multiple_of(self.stride)
            || !width.is_multiple_of(self.stride)
        {
            return Err(Error::ShapeMismatch(format!(
                "image {height}x{width} not divisible by stride {}",
                self.stride
            )));
        }
        Ok((height / self.stride, width / self.stride))
    }
}

/// Raw per-cell outputs in `(row, col, channel)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOutput {
    pub stride: usize,
    /// Pre-sigmoid objectness, `Hf x Wf`.
    pub objectness: Array2<f64>,
    /// `Hf x Wf x K` logits over known categories.
    pub cat_logits: Array3<f64>,
    /// `Hf x Wf x 4` non-negative (left, top, right, bottom) pixel distances.
    pub box_offsets: Array3<f64>,
    /// `Hf x Wf x 4` pre-activation values behind `box_offsets`.
    pub box_logits: Array3<f64>,
    /// `Hf x Wf x D` unnormalized embeddings.
    pub embeddings: Array3<f64>,
}

impl DenseOutput {
    pub fn grid(&self) -> (usize, usize) {
        self.objectness.dim()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        let (h, w) = self.grid();
        (h * self.stride, w * self.stride)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    /// Cell whose footprint contains `(x, y)`, clamped to the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> (usize, usize) {
        let (h, w) = self.grid();
        let s = self.stride as f64;
        let col = ((x / s).floor().max(0.0) as usize).min(w - 1);
        let row = ((y / s).floor().max(0.0) as usize).min(h - 1);
        (row, col)
    }

    /// Unnormalized box `(cx - l, cy - t, cx + r, cy + b)` predicted at a cell.
    pub fn predicted_box(&self, row: usize, col: usize) -> BBox {
        let (cx, cy) = self.cell_center(row, col);
        let o = &self.box_offsets;
        BBox::new(
            cx - o[[row, col, 0]],
            cy - o[[row, col, 1]],
            cx + o[[row, col, 2]],
            cy + o[[row, col, 3]],
        )
    }

    pub fn embedding_at(&self, row: usize, col: usize) -> Vec<f64> {
        self.embeddings.slice(ndarray::s![row, col, ..]).to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.objectness.iter().all(|v| v.is_finite())
            && self.cat_logits.iter().all(|v| v.is_finite())
            && self.box_offsets.iter().all(|v| v.is_finite())
            && self.embeddings.iter().all(|v| v.is_finite())
    }
}

/// Gradient of a scalar loss with respect to each [`DenseOutput`] map.
///
/// `box_offsets` holds the gradient with respect to the activated offsets; the
/// network backward pass chains it through the activation.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub objectness: Array2<f64>,
    pub cat_logits: Array3<f64>,
    pub box_offsets: Array3<f64>,
    pub embeddings: Array3<f64>,
}

impl DenseGrad {
    pub fn zeros_like(out: &DenseOutput) -> Self {
        Self {
            objectness: Array2::zeros(out.objectness.raw_dim()),
            cat_logits: Array3::zeros(out.cat_logits.raw_dim()),
            box_offsets: Array3::zeros(out.box_offsets.raw_dim()),
            embeddings: Array3::zeros(out.embeddings.raw_dim()),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &DenseGrad, scale: f64) {
        self.objectness.scaled_add(scale, &other.objectness);
        self.cat_logits.scaled_add(scale, &other.cat_logits);
        self.box_offsets.scaled_add(scale, &other.box_offsets);
        self.embeddings.scaled_add(scale, &other.embeddings);
    }

    pub fn is_zero(&self) -> bool {
        self.objectness.iter().all(|&v| v == 0.0)
            && self.cat_logits.iter().all(|&v| v == 0.0)
            && self.box_offsets.iter().all(|&v| v == 0.0)
            && self.embeddings.iter().all(|&v| v == 0.0)
    }
}

/// An RGB image as an `H x W x 3` array of values in `[0, 1]`.
pub type Image = Array3<f64>;

/// Anything that turns an image into dense outputs and decoded instances.
///
/// The tracker and the evaluation code only depend on this trait, so a
/// different student network can be dropped in.
pub trait Detector {
    fn dense(&self, image: &Image) -> Result<DenseOutput>;

    fn config(&self) -> &DetectorConfig;

    fn detect(&self, image: &Image) -> Result<Vec<Instance>> {
        let out = self.dense(image)?;
        Ok(decode(&out, self.config()))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub(crate) fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}
