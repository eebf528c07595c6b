use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{sigmoid, softplus, DenseGrad, DenseOutput, Detector, DetectorConfig, Image};
use crate::error::{Error, Result};

/// A named parameter array stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    fn view2(&self) -> ArrayView2<'_, f64> {
        let cols = self.data.len() / self.shape[0];
        ArrayView2::from_shape((self.shape[0], cols), &self.data).expect("tensor shape")
    }

    fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let cols = self.data.len() / self.shape[0];
        ArrayViewMut2::from_shape((self.shape[0], cols), &mut self.data).expect("tensor shape")
    }
}

/// Ordered set of named parameter tensors. Gradients use the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

const HEADS: [&str; 4] = ["objectness", "category", "box", "embedding"];

impl Params {
    /// Zero-filled parameters with the layout implied by `cfg`.
    pub fn zeros(cfg: &DetectorConfig) -> Self {
        let mut tensors = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            tensors.push(Tensor::zeros(
                format!("backbone.{i}.weight"),
                vec![c_out, c_in, 3, 3],
            ));
            tensors.push(Tensor::zeros(format!("backbone.{i}.bias"), vec![c_out]));
            c_in = c_out;
        }
        let outs = [1, cfg.num_classes, 4, cfg.embed_dim];
        for (name, out) in HEADS.iter().zip(outs) {
            tensors.push(Tensor::zeros(
                format!("head.{name}.weight"),
                vec![out, c_in],
            ));
            tensors.push(Tensor::zeros(format!("head.{name}.bias"), vec![out]));
        }
        Self { tensors }
    }

    /// He-normal backbone, small-normal heads, objectness bias at the prior.
    pub fn init(cfg: &DetectorConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_conv = cfg.channels.len();
        for i in 0..n_conv {
            let w = &mut p.tensors[2 * i];
            let fan_in = (w.shape[1] * 9) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("std");
            w.data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        let c = *cfg.channels.last().expect("channels");
        for (h, name) in HEADS.iter().enumerate() {
            let std = match *name {
                "embedding" => (1.0 / c as f64).sqrt(),
                _ => 0.01,
            };
            let dist = Normal::new(0.0, std).expect("std");
            let w = &mut p.tensors[2 * (n_conv + h)];
            w.data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        let obj_bias = &mut p.tensors[2 * n_conv + 1];
        obj_bias.data[0] = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
        // softplus(0.5413) = 1, i.e. offsets start at one stride
        let box_bias = &mut p.tensors[2 * (n_conv + 2) + 1];
        box_bias.data.iter_mut().for_each(|v| *v = 0.5413);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    /// Reads the `i`-th scalar in flattened order.
    pub fn flat(&self, mut i: usize) -> f64 {
        for t in &self.tensors {
            if i < t.data.len() {
                return t.data[i];
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn flat_mut(&mut self, mut i: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if i < t.data.len() {
                return &mut t.data[i];
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data
                .iter_mut()
                .zip(&b.data)
                .for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors
            .iter_mut()
            .for_each(|t| t.data.iter_mut().for_each(|v| *v *= s));
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Checks names and shapes against the layout implied by `cfg`.
    pub fn check_layout(&self, cfg: &DetectorConfig) -> Result<()> {
        let expected = Self::zeros(cfg);
        if expected.tensors.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                expected.tensors.len(),
                self.tensors.len()
            )));
        }
        for (e, t) in expected.tensors.iter().zip(&self.tensors) {
            if e.name != t.name || e.shape != t.shape || t.data.len() != e.data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, e.name, e.shape
                )));
            }
        }
        Ok(())
    }
}

struct ConvCache {
    cols: Array2<f64>,
    in_dims: (usize, usize, usize),
    /// Post-ReLU output, `C_out x (Ho * Wo)`.
    out: Array2<f64>,
}

/// Intermediate activations needed by [`Network::backward`].
pub struct ForwardCache {
    convs: Vec<ConvCache>,
    grid: (usize, usize),
}

/// The reference student network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: DetectorConfig,
    pub params: Params,
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    stride: usize,
) -> (Array2<f64>, usize, usize) {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut cols = Array2::<f64>::zeros((c * 9, ho * wo));
    {
        let cols_s = cols.as_slice_mut().expect("contiguous");
        let p = ho * wo;
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row =
                        &mut cols_s[(ci * 9 + ky * 3 + kx) * p..(ci * 9 + ky * 3 + kx + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &Array2<f64>, (c, h, w): (usize, usize, usize), stride: usize) -> Vec<f64> {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let p = ho * wo;
    let cols_s = cols.as_slice().expect("contiguous");
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols_s[(ci * 9 + ky * 3 + kx) * p..(ci * 9 + ky * 3 + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Network {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: DetectorConfig, params: Params) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    fn n_conv(&self) -> usize {
        self.config.channels.len()
    }

    fn layer_stride(&self, i: usize) -> usize {
        if i < self.config.stride.trailing_zeros() as usize {
            2
        } else {
            1
        }
    }

    /// Runs all four heads in one pass. Deterministic given `(image, params)`.
    pub fn forward(&self, image: &Image) -> Result<(DenseOutput, ForwardCache)> {
        let (h, w, ch) = image.dim();
        if ch != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image has {ch} channels, expected 3"
            )));
        }
        let (hf, wf) = self.config.grid_dims(h, w)?;

        // HWC -> CHW, centred
        let mut x = vec![0.0; 3 * h * w];
        for ((r, c, k), v) in image.indexed_iter() {
            x[k * h * w + r * w + c] = v - 0.5;
        }
        let mut dims = (3, h, w);
        let mut convs = Vec::with_capacity(self.n_conv());
        for i in 0..self.n_conv() {
            let stride = self.layer_stride(i);
            let (cols, ho, wo) = im2col(&x, dims, stride);
            let wt = &self.params.tensors[2 * i];
            let bias = &self.params.tensors[2 * i + 1].data;
            let c_out = wt.shape[0];
            let mut out = Array2::<f64>::zeros((c_out, ho * wo));
            general_mat_mul(1.0, &wt.view2(), &cols, 0.0, &mut out);
            for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias) {
                row.mapv_inplace(|v| (v + b).max(0.0));
            }
            x = out.as_slice().expect("contiguous").to_vec();
            convs.push(ConvCache {
                cols,
                in_dims: dims,
                out,
            });
            dims = (c_out, ho, wo);
        }
        debug_assert_eq!((dims.1, dims.2), (hf, wf));
        let feats = &convs.last().expect("at least one layer").out;

        let mut heads = Vec::with_capacity(4);
        for hidx in 0..4 {
            let wt = &self.params.tensors[2 * (self.n_conv() + hidx)];
            let bias = &self.params.tensors[2 * (self.n_conv() + hidx) + 1].data;
            let mut y = Array2::<f64>::zeros((wt.shape[0], hf * wf));
            general_mat_mul(1.0, &wt.view2(), feats, 0.0, &mut y);
            for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bias) {
                row.mapv_inplace(|v| v + b);
            }
            heads.push(y);
        }
        let to_hwc = |y: &Array2<f64>| -> Array3<f64> {
            let k = y.nrows();
            Array3::from_shape_fn((hf, wf, k), |(r, c, j)| y[[j, r * wf + c]])
        };
        let objectness = Array2::from_shape_fn((hf, wf), |(r, c)| heads[0][[0, r * wf + c]]);
        let cat_logits = to_hwc(&heads[1]);
        let box_logits = to_hwc(&heads[2]);
        let s = self.config.stride as f64;
        let box_offsets = box_logits.mapv(|z| s * softplus(z));
        let embeddings = to_hwc(&heads[3]);
        let out = DenseOutput {
            stride: self.config.stride,
            objectness,
            cat_logits,
            box_offsets,
            box_logits,
            embeddings,
        };
        Ok((
            out,
            ForwardCache {
                convs,
                grid: (hf, wf),
            },
        ))
    }

    /// Accumulates parameter gradients for the loss whose dense gradient is `grad`.
    pub fn backward(
        &self,
        out: &DenseOutput,
        cache: &ForwardCache,
        grad: &DenseGrad,
        param_grad: &mut Params,
    ) {
        let (hf, wf) = cache.grid;
        let p = hf * wf;
        let s = self.config.stride as f64;
        let from_hwc = |a: &Array3<f64>| -> Array2<f64> {
            let k = a.dim().2;
            Array2::from_shape_fn((k, p), |(j, i)| a[[i / wf, i % wf, j]])
        };
        let d_obj = Array2::from_shape_fn((1, p), |(_, i)| grad.objectness[[i / wf, i % wf]]);
        let d_cat = from_hwc(&grad.cat_logits);
        let d_box_act = grad.box_offsets.clone() * out.box_logits.mapv(|z| s * sigmoid(z));
        let d_box = from_hwc(&d_box_act);
        let d_emb = from_hwc(&grad.embeddings);

        let n_conv = self.n_conv();
        let feats = &cache.convs[n_conv - 1].out;
        let mut d_feats = Array2::<f64>::zeros(feats.raw_dim());
        for (hidx, dy) in [d_obj, d_cat, d_box, d_emb].iter().enumerate() {
            let ti = 2 * (n_conv + hidx);
            {
                let mut dw = param_grad.tensors[ti].view2_mut();
                general_mat_mul(1.0, dy, &feats.t(), 1.0, &mut dw);
            }
            for (db, row) in param_grad.tensors[ti + 1]
                .data
                .iter_mut()
                .zip(dy.axis_iter(Axis(0)))
            {
                *db += row.sum();
            }
            general_mat_mul(
                1.0,
                &self.params.tensors[ti].view2().t(),
                dy,
                1.0,
                &mut d_feats,
            );
        }

        let mut d_out = d_feats;
        for i in (0..n_conv).rev() {
            let layer = &cache.convs[i];
            // ReLU
            d_out.zip_mut_with(&layer.out, |d, &y| {
                if y <= 0.0 {
                    *d = 0.0;
                }
            });
            {
                let mut dw = param_grad.tensors[2 * i].view2_mut();
                general_mat_mul(1.0, &d_out, &layer.cols.t(), 1.0, &mut dw);
            }
            for (db, row) in param_grad.tensors[2 * i + 1]
                .data
                .iter_mut()
                .zip(d_out.axis_iter(Axis(0)))
            {
                *db += row.sum();
            }
            if i == 0 {
                break;
            }
            let mut d_cols = Array2::<f64>::zeros(layer.cols.raw_dim());
            general_mat_mul(
                1.0,
                &self.params.tensors[2 * i].view2().t(),
                &d_out,
                0.0,
                &mut d_cols,
            );
            let dx = col2im(&d_cols, layer.in_dims, self.layer_stride(i));
            let (c, h, w) = layer.in_dims;
            d_out = Array2::from_shape_vec((c, h * w), dx).expect("shape");
        }
    }
}

impl Detector for Network {
    fn dense(&self, image: &Image) -> Result<DenseOutput> {
        Ok(self.forward(image)?.0)
    }

    fn config(&self) -> &DetectorConfig {
        &self.config
    }
}
