//! The combined objective and the training loop.
//!
//! `total = lambda_det * detection + lambda_refine * refine + lambda_transfer * transfer`
//!
//! Refine and transfer switch on after `warmup_epochs`, so that candidate
//! selection sees a detector whose objectness is no longer random. Batch order
//! is a pure function of `(seed, epoch)`, which makes resumed runs reproduce
//! uninterrupted ones.
//!
//! A run directory holds `config.toml`, `best.ckpt`, `last.ckpt`,
//! `metrics.json` and `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{
    assign_targets, decode, detection_loss, load_checkpoint, save_checkpoint, Checkpoint,
    DenseGrad, DenseOutput, DetectorConfig, ForwardCache, Image, Network, Params,
};
use crate::embed_transfer::{
    collect_transfer_instances, roi_pool_teacher, similarity_matrix, transfer_loss_embeddings,
    InstanceSource, SimilarityRole, TeacherFeatureMap, TransferConfig, TransferInstance,
};
use crate::error::{Error, Result};
use crate::evaluation::{fill_detection_metrics, fill_discovery_metrics, EvalConfig, MetricReport};
use crate::geometry::{iou, mask_to_box, BBox, BinaryMask};
use crate::synthdata::{
    generate_scenes, load_dataset, oracle_segmenter, OracleTeacher, Roster, Scene, SceneSpec,
    SegmenterConfig, TeacherConfig,
};
use crate::tracker::{TrackerConfig, TrackingConfig};
use crate::unknown_refine::{
    build_pseudo_targets, refine_loss_dense, select_unknown_candidates, RefineConfig,
    KNOWN_OVERLAP_IOU,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Cosine decay to zero over all steps.
    Cosine,
    /// Multiply by `step_gamma` every `step_every` epochs.
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub schedule: Schedule,
    pub step_every: usize,
    pub step_gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.02,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 5.0,
            schedule: Schedule::Cosine,
            step_every: 4,
            step_gamma: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Seed for scene generation; the run seed when absent.
    pub seed: Option<u64>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Read scenes from this dataset directory instead of generating them.
    /// Train, validation and test take consecutive slices in that order.
    pub dataset: Option<PathBuf>,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: None,
            train_scenes: 500,
            val_scenes: 100,
            test_scenes: 200,
            dataset: None,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub lambda_det: f64,
    pub lambda_refine: f64,
    pub lambda_transfer: f64,
    pub enable_refine: bool,
    pub enable_transfer: bool,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub refine: RefineConfig,
    pub transfer: TransferConfig,
    pub segmenter: SegmenterConfig,
    pub teacher: TeacherConfig,
    pub eval: EvalConfig,
    pub tracker: TrackerConfig,
    pub tracking: TrackingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 8,
            warmup_epochs: 2,
            lambda_det: 1.0,
            lambda_refine: 1.0,
            lambda_transfer: 1.0,
            enable_refine: false,
            enable_transfer: false,
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            detector: DetectorConfig::default(),
            refine: RefineConfig::default(),
            transfer: TransferConfig::default(),
            segmenter: SegmenterConfig::default(),
            teacher: TeacherConfig::default(),
            eval: EvalConfig::default(),
            tracker: TrackerConfig::default(),
            tracking: TrackingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::schema(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_det", self.lambda_det),
            ("lambda_refine", self.lambda_refine),
            ("lambda_transfer", self.lambda_transfer),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.grad_clip >= 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        let (h, w) = (self.data.scene.height, self.data.scene.width);
        self.detector.validate()?;
        self.detector.grid_dims(h, w)?;
        if self.detector.num_classes != self.data.scene.roster.num_known() {
            return Err(Error::Config(format!(
                "detector has {} classes but the roster has {} known categories",
                self.detector.num_classes,
                self.data.scene.roster.num_known()
            )));
        }
        self.data.scene.validate()?;
        self.refine.validate()?;
        self.transfer.validate()?;
        self.tracker.validate()?;
        Ok(())
    }

    /// Seed of the generated scenes.
    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    /// Learning rate at global step `step` out of `total`.
    pub fn lr_at(&self, epoch: usize, step: usize, total: usize) -> f64 {
        let o = &self.optimizer;
        match o.schedule {
            Schedule::Constant => o.lr,
            Schedule::Cosine => {
                let t = if total == 0 {
                    0.0
                } else {
                    step as f64 / total as f64
                };
                0.5 * o.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::Step => o.lr * o.step_gamma.powi((epoch / o.step_every.max(1)) as i32),
        }
    }
}

/// Momentum SGD or Adam over a [`Params`] set.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// SGD: `[velocity]`. Adam: `[first moment, second moment]`.
    pub state: Vec<Params>,
    pub steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &Params) -> Self {
        let n = match config.kind {
            OptimizerKind::Sgd => 1,
            OptimizerKind::Adam => 2,
        };
        Self {
            config,
            state: vec![params.zeros_like(); n],
            steps: 0,
        }
    }

    /// Applies one update with learning rate `lr`. `grad` is clipped in place.
    pub fn update(&mut self, params: &mut Params, grad: &mut Params, lr: f64) {
        let c = &self.config;
        if c.grad_clip > 0.0 {
            let norm = grad.values().map(|g| g * g).sum::<f64>().sqrt();
            if norm > c.grad_clip {
                grad.scale(c.grad_clip / norm);
            }
        }
        if c.weight_decay > 0.0 {
            grad.add_scaled(params, c.weight_decay);
        }
        self.steps += 1;
        match c.kind {
            OptimizerKind::Sgd => {
                let v = &mut self.state[0];
                v.scale(c.momentum);
                v.add_scaled(grad, 1.0);
                params.add_scaled(v, -lr);
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (c.beta1, c.beta2);
                let bc1 = 1.0 - b1.powi(self.steps as i32);
                let bc2 = 1.0 - b2.powi(self.steps as i32);
                let (m, v) = self.state.split_at_mut(1);
                for ((pt, gt), (mt, vt)) in params
                    .tensors
                    .iter_mut()
                    .zip(&grad.tensors)
                    .zip(m[0].tensors.iter_mut().zip(v[0].tensors.iter_mut()))
                {
                    for i in 0..pt.data.len() {
                        let g = gt.data[i];
                        mt.data[i] = b1 * mt.data[i] + (1.0 - b1) * g;
                        vt.data[i] = b2 * vt.data[i] + (1.0 - b2) * g * g;
                        pt.data[i] -= lr * (mt.data[i] / bc1) / ((vt.data[i] / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
    }
}

/// One training image with everything the three losses need, precomputed.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: Scene,
    pub image: Image,
    pub known_gt: Vec<(BBox, usize)>,
    /// Oracle-segmenter masks, minus any whose box overlaps a known box at
    /// [`KNOWN_OVERLAP_IOU`] or more.
    pub masks: Vec<BinaryMask>,
    pub teacher: Option<TeacherFeatureMap>,
}

impl Sample {
    pub fn new(
        scene: Scene,
        roster: &Roster,
        segmenter: &SegmenterConfig,
        teacher: Option<&OracleTeacher>,
    ) -> Self {
        let known_gt = scene.known_gt(roster);
        let masks = oracle_segmenter(&scene.records, scene.image_id, segmenter)
            .into_iter()
            .filter(|m| match mask_to_box(m) {
                Ok(b) => known_gt.iter().all(|(g, _)| iou(&b, g) < KNOWN_OVERLAP_IOU),
                Err(_) => true,
            })
            .collect();
        let teacher = teacher.map(|t| t.feature_map(&scene));
        Self {
            image: scene.image.to_float(),
            scene,
            known_gt,
            masks,
            teacher,
        }
    }

    pub fn known_boxes(&self) -> Vec<BBox> {
        self.known_gt.iter().map(|g| g.0).collect()
    }
}

/// Which optional terms are live for a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Active {
    pub refine: bool,
    pub transfer: bool,
}

impl Active {
    pub fn at_epoch(cfg: &TrainConfig, epoch: usize) -> Self {
        let warm = epoch >= cfg.warmup_epochs;
        Self {
            refine: cfg.enable_refine && warm,
            transfer: cfg.enable_transfer && warm,
        }
    }
}

/// Batch-mean loss terms, unweighted, and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub detection: f64,
    pub refine: f64,
    pub transfer: f64,
    pub total: f64,
    pub refine_pairs: usize,
    pub transfer_instances: usize,
}

impl LossBreakdown {
    fn accumulate(&mut self, o: &LossBreakdown, w: f64) {
        self.detection += w * o.detection;
        self.refine += w * o.refine;
        self.transfer += w * o.transfer;
        self.total += w * o.total;
        self.refine_pairs += o.refine_pairs;
        self.transfer_instances += o.transfer_instances;
    }
}

fn finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{term} term")))
    }
}

/// Forward pass of one image with its dense gradient under construction.
struct ImagePass {
    out: DenseOutput,
    cache: ForwardCache,
    grad: DenseGrad,
    loss: LossBreakdown,
    /// Transfer instances: student cell, raw student embedding, pooled teacher vector.
    transfer: Vec<TransferInput>,
}

type TransferInput = ((usize, usize), Vec<f64>, Vec<f64>);

/// Forward pass, detection and refine terms, and transfer inputs. Gradients
/// are scaled by `weight`, the image's share of the batch mean.
fn forward_image(
    net: &Network,
    sample: &Sample,
    cfg: &TrainConfig,
    active: Active,
    weight: f64,
) -> Result<ImagePass> {
    let (out, cache) = net.forward(&sample.image)?;
    let targets = assign_targets(&sample.known_gt, out.grid(), out.stride);
    let det = detection_loss(&out, &targets)
        .map_err(|e| Error::NonFinite(format!("detection term: {e}")))?;
    let mut loss = LossBreakdown {
        detection: finite("detection", det.total)?,
        ..Default::default()
    };
    let mut grad = DenseGrad::zeros_like(&out);
    grad.add_scaled(&det.grad, weight * cfg.lambda_det);
    let mut transfer = Vec::new();

    if active.refine || active.transfer {
        let decoded = decode(&out, &net.config);
        let known = sample.known_boxes();
        if active.refine {
            let candidates = select_unknown_candidates(&decoded, &known, &cfg.refine);
            let pseudo = build_pseudo_targets(&decoded, &candidates, &sample.masks, &cfg.refine);
            for p in &pseudo.pairs {
                assert!(
                    known
                        .iter()
                        .all(|g| iou(&p.target_box, g) < KNOWN_OVERLAP_IOU),
                    "pseudo target overlaps a known box"
                );
            }
            let (v, g) = refine_loss_dense(&pseudo.pairs, &decoded, &out, &cfg.refine)
                .map_err(|e| Error::NonFinite(format!("refine term: {e}")))?;
            loss.refine = finite("refine", v)?;
            loss.refine_pairs = pseudo.pairs.len();
            grad.add_scaled(&g, weight * cfg.lambda_refine);
        }
        if active.transfer {
            let teacher = sample
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Config("transfer enabled without teacher features".into()))?;
            let mut sel = cfg.refine.clone();
            if let Some(t) = cfg.transfer.candidate_tau_obj {
                sel.tau_obj = t;
            }
            let candidates = select_unknown_candidates(&decoded, &known, &sel);
            let mut insts = collect_transfer_instances(&known, &decoded, &candidates, &out);
            if cfg.transfer.mask_proposals {
                insts.extend(
                    sample
                        .masks
                        .iter()
                        .filter_map(|m| mask_to_box(m).ok())
                        .map(|b| {
                            let (x, y) = b.center();
                            TransferInstance {
                                bbox: b,
                                cell: out.cell_at(x, y),
                                source: InstanceSource::MaskProposal,
                            }
                        }),
                );
            }
            let boxes: Vec<BBox> = insts.iter().map(|t| t.bbox).collect();
            let pooled = roi_pool_teacher(teacher, &boxes);
            transfer = insts
                .iter()
                .zip(pooled)
                .map(|(t, p)| (t.cell, out.embedding_at(t.cell.0, t.cell.1), p))
                .collect();
        }
    }
    Ok(ImagePass {
        out,
        cache,
        grad,
        loss,
        transfer,
    })
}

/// Transfer loss over `items`, with embedding gradients scaled by `scale`
/// and routed back to their images.
fn apply_transfer(
    passes: &mut [ImagePass],
    items: &[(usize, usize)],
    cfg: &TrainConfig,
    scale: f64,
) -> Result<(f64, usize)> {
    if items.len() < cfg.transfer.min_instances.max(2) {
        return Ok((0.0, 0));
    }
    let teacher: Vec<Vec<f64>> = items
        .iter()
        .map(|&(p, k)| passes[p].transfer[k].2.clone())
        .collect();
    let raw: Vec<Vec<f64>> = items
        .iter()
        .map(|&(p, k)| passes[p].transfer[k].1.clone())
        .collect();
    let t = similarity_matrix(&teacher, SimilarityRole::Teacher);
    let (v, g) = transfer_loss_embeddings(&t, &raw, &cfg.transfer)
        .map_err(|e| Error::NonFinite(format!("transfer term: {e}")))?;
    for (&(p, k), gi) in items.iter().zip(&g) {
        let (r, c) = passes[p].transfer[k].0;
        for (d, gd) in gi.iter().enumerate() {
            passes[p].grad.embeddings[[r, c, d]] += scale * cfg.lambda_transfer * gd;
        }
    }
    Ok((finite("transfer", v)?, items.len()))
}

/// Batch-mean loss and gradient.
///
/// Per-image terms are averaged over the batch. In cross-batch mode the
/// transfer term is one loss over the instances of every image. Reduction runs
/// in batch order, so the result does not depend on thread count.
pub fn batch_gradient(
    net: &Network,
    batch: &[&Sample],
    cfg: &TrainConfig,
    active: Active,
) -> Result<(LossBreakdown, Params)> {
    let w = 1.0 / batch.len().max(1) as f64;
    let mut passes: Vec<ImagePass> = batch
        .par_iter()
        .map(|s| forward_image(net, s, cfg, active, w))
        .collect::<Result<_>>()?;
    let mut total = LossBreakdown::default();
    if active.transfer {
        if cfg.transfer.cross_batch {
            let items: Vec<(usize, usize)> = passes
                .iter()
                .enumerate()
                .flat_map(|(p, ps)| (0..ps.transfer.len()).map(move |k| (p, k)))
                .collect();
            let (v, n) = apply_transfer(&mut passes, &items, cfg, 1.0)?;
            total.transfer = v;
            total.transfer_instances = n;
        } else {
            for p in 0..passes.len() {
                let items: Vec<(usize, usize)> =
                    (0..passes[p].transfer.len()).map(|k| (p, k)).collect();
                let (v, n) = apply_transfer(&mut passes, &items, cfg, w)?;
                total.transfer += w * v;
                total.transfer_instances += n;
            }
        }
    }
    for p in &passes {
        total.detection += w * p.loss.detection;
        total.refine += w * p.loss.refine;
        total.refine_pairs += p.loss.refine_pairs;
    }
    total.total = cfg.lambda_det * total.detection
        + cfg.lambda_refine * total.refine
        + cfg.lambda_transfer * total.transfer;
    let grads: Vec<Params> = passes
        .par_iter()
        .map(|p| {
            let mut pg = net.params.zeros_like();
            net.backward(&p.out, &p.cache, &p.grad, &mut pg);
            pg
        })
        .collect();
    let mut grad = net.params.zeros_like();
    for g in &grads {
        grad.add_scaled(g, 1.0);
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    Ok((total, grad))
}

/// Loss and parameter gradient for one image.
pub fn image_loss(
    net: &Network,
    sample: &Sample,
    cfg: &TrainConfig,
    active: Active,
) -> Result<(LossBreakdown, Params)> {
    batch_gradient(net, &[sample], cfg, active)
}

/// One optimisation step on `batch`.
pub fn train_step(
    net: &mut Network,
    opt: &mut Optimizer,
    batch: &[&Sample],
    cfg: &TrainConfig,
    active: Active,
    lr: f64,
) -> Result<LossBreakdown> {
    let (b, mut g) = batch_gradient(net, batch, cfg, active)?;
    opt.update(&mut net.params, &mut g, lr);
    if !net.params.is_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(b)
}

/// Scenes for one run.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub roster: Roster,
    pub train: Vec<Sample>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl TrainData {
    pub fn prepare(cfg: &TrainConfig) -> Result<Self> {
        let (roster, train, val, test) = load_splits(cfg)?;
        let teacher = if cfg.enable_transfer {
            Some(OracleTeacher::new(&roster, cfg.teacher.clone())?)
        } else {
            None
        };
        let train = train
            .into_par_iter()
            .map(|s| Sample::new(s, &roster, &cfg.segmenter, teacher.as_ref()))
            .collect();
        Ok(Self {
            roster,
            train,
            val,
            test,
        })
    }
}

/// Roster plus train, validation and test scenes.
pub type Splits = (Roster, Vec<Scene>, Vec<Scene>, Vec<Scene>);

/// Train, validation and test scenes with the roster they were drawn from.
pub fn load_splits(cfg: &TrainConfig) -> Result<Splits> {
    let d = &cfg.data;
    Ok(match &d.dataset {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            let need = d.train_scenes + d.val_scenes + d.test_scenes;
            if ds.scenes.len() < need {
                return Err(Error::schema(
                    dir,
                    format!("{} scenes, {need} required", ds.scenes.len()),
                ));
            }
            let mut it = ds.scenes.into_iter();
            let train: Vec<Scene> = it.by_ref().take(d.train_scenes).collect();
            let val: Vec<Scene> = it.by_ref().take(d.val_scenes).collect();
            let test: Vec<Scene> = it.take(d.test_scenes).collect();
            (ds.roster, train, val, test)
        }
        None => {
            let seed = cfg.data_seed();
            let (nt, nv) = (d.train_scenes as u64, d.val_scenes as u64);
            (
                d.scene.roster.clone(),
                generate_scenes(seed, 0, d.train_scenes, &d.scene)?,
                generate_scenes(seed, nt, d.val_scenes, &d.scene)?,
                generate_scenes(seed, nt + nv, d.test_scenes, &d.scene)?,
            )
        }
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_u_recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub enable_refine: bool,
    pub enable_transfer: bool,
    pub epochs_completed: usize,
    /// Validation U-Recall of the freshly initialised network.
    pub initial_val_u_recall: f64,
    pub curve: Vec<EpochRecord>,
    /// Only epochs after warmup compete, so the selected network was trained
    /// under the full configured objective. 0 only when `epochs` is 0.
    pub best_epoch: usize,
    pub best_val_u_recall: f64,
    pub metric_report: String,
    pub checkpoint: String,
    pub last_checkpoint: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn val_u_recall(net: &Network, data: &TrainData, cfg: &TrainConfig) -> Result<f64> {
    let mut r = MetricReport::new(cfg.seed, serde_json::Value::Null);
    fill_detection_metrics(&mut r, net, &data.val, &data.roster, &cfg.eval)?;
    Ok(r.u_recall.unwrap_or(0.0))
}

/// Checkpoint `extra` payload carrying loop state for resumption.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct LoopState {
    config_hash: String,
    optimizer_steps: u64,
    initial_val_u_recall: f64,
    curve: Vec<EpochRecord>,
    best_epoch: usize,
    best_val_u_recall: f64,
}

fn checkpoint(net: &Network, opt: &Optimizer, epoch: usize, state: &LoopState) -> Checkpoint {
    Checkpoint {
        detector: net.config.clone(),
        params: net.params.clone(),
        epoch,
        optimizer_state: opt.state.clone(),
        extra: serde_json::to_value(state).expect("loop state serializes"),
    }
}

/// Batch order for `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB47C_0DE5);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains from scratch into `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<RunManifest> {
    run(cfg, out_dir, None, cfg.epochs).map(|m| m.expect("ran every epoch"))
}

/// Trains from scratch but stops after `epochs` epochs, leaving the
/// checkpoints an interrupted run would. Returns the manifest only when the
/// configured number of epochs was reached.
pub fn train_until(
    cfg: &TrainConfig,
    out_dir: &Path,
    epochs: usize,
) -> Result<Option<RunManifest>> {
    run(cfg, out_dir, None, epochs)
}

/// Continues a run from a `last.ckpt` written by an earlier call with the
/// same configuration.
pub fn resume(cfg: &TrainConfig, out_dir: &Path, checkpoint_path: &Path) -> Result<RunManifest> {
    run(cfg, out_dir, Some(checkpoint_path), cfg.epochs).map(|m| m.expect("ran every epoch"))
}

fn run(
    cfg: &TrainConfig,
    out_dir: &Path,
    from: Option<&Path>,
    stop: usize,
) -> Result<Option<RunManifest>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let hash = cfg.hash();
    let data = TrainData::prepare(cfg)?;

    let mut net = Network::new(cfg.detector.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &net.params);
    let mut start = 0;
    let mut state;
    match from {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            state = serde_json::from_value::<LoopState>(ck.extra.clone())
                .map_err(|e| Error::schema(path, format!("loop state: {e}")))?;
            if state.config_hash != hash {
                return Err(Error::schema(
                    path,
                    "checkpoint was written under a different configuration",
                ));
            }
            if ck.optimizer_state.len() != opt.state.len() {
                return Err(Error::schema(
                    path,
                    "optimizer state does not match the configured optimizer",
                ));
            }
            net = Network::from_params(ck.detector, ck.params)?;
            opt.state = ck.optimizer_state;
            opt.steps = state.optimizer_steps;
            start = ck.epoch;
        }
        None => {
            let v = val_u_recall(&net, &data, cfg)?;
            state = LoopState {
                config_hash: hash.clone(),
                initial_val_u_recall: v,
                best_val_u_recall: v,
                ..Default::default()
            };
            save_checkpoint(
                &checkpoint(&net, &opt, 0, &state),
                &out_dir.join(BEST_CHECKPOINT),
            )?;
            save_checkpoint(
                &checkpoint(&net, &opt, 0, &state),
                &out_dir.join(LAST_CHECKPOINT),
            )?;
        }
    }

    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    for epoch in start..stop.min(cfg.epochs) {
        let active = Active::at_epoch(cfg, epoch);
        let order = epoch_order(cfg.seed, epoch, n);
        let mut sum = LossBreakdown::default();
        let mut lr = 0.0;
        for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&j| &data.train[j]).collect();
            lr = cfg.lr_at(epoch, epoch * steps_per_epoch + i, total_steps);
            let b = train_step(&mut net, &mut opt, &batch, cfg, active, lr)?;
            sum.accumulate(&b, 1.0 / steps_per_epoch as f64);
        }
        let v = val_u_recall(&net, &data, cfg)?;
        log::info!(
            "epoch {} loss {:.4} (det {:.4} refine {:.4} transfer {:.4}) val U-Recall {:.3}",
            epoch + 1,
            sum.total,
            sum.detection,
            sum.refine,
            sum.transfer,
            v
        );
        state.curve.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: sum,
            val_u_recall: v,
        });
        state.optimizer_steps = opt.steps;
        let first_eligible = (cfg.warmup_epochs + 1).min(cfg.epochs);
        if epoch + 1 >= first_eligible
            && (epoch + 1 == first_eligible || v > state.best_val_u_recall)
        {
            state.best_val_u_recall = v;
            state.best_epoch = epoch + 1;
            save_checkpoint(
                &checkpoint(&net, &opt, epoch + 1, &state),
                &out_dir.join(BEST_CHECKPOINT),
            )?;
        }
        save_checkpoint(
            &checkpoint(&net, &opt, epoch + 1, &state),
            &out_dir.join(LAST_CHECKPOINT),
        )?;
    }
    if stop < cfg.epochs {
        return Ok(None);
    }

    let best = load_checkpoint(&out_dir.join(BEST_CHECKPOINT))?;
    let best_net = Network::from_params(best.detector, best.params)?;
    let report = evaluate_run(&best_net, &data, cfg)?;
    report.save(&out_dir.join(METRICS_FILE))?;
    let manifest = RunManifest {
        config_hash: hash,
        seed: cfg.seed,
        enable_refine: cfg.enable_refine,
        enable_transfer: cfg.enable_transfer,
        epochs_completed: cfg.epochs,
        initial_val_u_recall: state.initial_val_u_recall,
        curve: state.curve,
        best_epoch: state.best_epoch,
        best_val_u_recall: state.best_val_u_recall,
        metric_report: METRICS_FILE.into(),
        checkpoint: BEST_CHECKPOINT.into(),
        last_checkpoint: LAST_CHECKPOINT.into(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(Some(manifest))
}

/// Test-split report for a trained network.
pub fn evaluate_run(net: &Network, data: &TrainData, cfg: &TrainConfig) -> Result<MetricReport> {
    let echo = serde_json::to_value(cfg).expect("config serializes");
    let mut report = MetricReport::new(cfg.seed, echo);
    fill_detection_metrics(&mut report, net, &data.test, &data.roster, &cfg.eval)?;
    fill_discovery_metrics(&mut report, net, &data.test, &data.roster, &cfg.eval)?;
    Ok(report)
}
