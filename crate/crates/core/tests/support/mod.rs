//! Oracles and checks shared by the acceptance and invariant targets.
#![allow(dead_code)]

pub mod invariants;

use owd::assignment::{CostMatrix, FORBIDDEN};
use owd::detector::{
    assign_targets, detection_loss, DenseGrad, DenseOutput, DetectorConfig, Image, Instance, Label,
    Network,
};
use owd::embed_transfer::{
    similarity_matrix, transfer_loss_embeddings, LossKind, SimilarityRole, TransferConfig,
};
use owd::geometry::BBox;
use owd::unknown_refine::{refine_loss_dense, PseudoPair, RefineConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough for a full finite-difference sweep over every parameter.
pub fn tiny_detector() -> DetectorConfig {
    DetectorConfig {
        stride: 4,
        num_classes: 2,
        embed_dim: 4,
        channels: vec![4, 6],
        ..DetectorConfig::default()
    }
}

pub const TINY_SIDE: usize = 16;

pub fn random_image(side: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_shape_fn((side, side, 3), |_| rng.random())
}

pub fn random_box(side: f64, rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(3.0..side / 2.0);
    let h = rng.random_range(3.0..side / 2.0);
    let x = rng.random_range(0.0..side - w);
    let y = rng.random_range(0.0..side - h);
    BBox::new(x, y, x + w, y + h)
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Gradients below this magnitude are compared absolutely, at `floor * 1e-4`.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error between the analytic parameter gradient of `loss`
/// and central differences, over every parameter of `net`.
///
/// `loss` maps dense outputs to a value and the dense gradient of that value.
pub fn network_grad_error(
    net: &Network,
    image: &Image,
    loss: impl Fn(&DenseOutput) -> (f64, DenseGrad),
) -> f64 {
    let (out, cache) = net.forward(image).unwrap();
    let (_, g) = loss(&out);
    let mut analytic = net.params.zeros_like();
    net.backward(&out, &cache, &g, &mut analytic);
    // Round-off in the loss grows like 1/h and truncation like h^2; 1e-4
    // already steps across ReLU kinks on some seeds.
    let h = 3e-5;
    let mut worst: f64 = 0.0;
    for i in 0..net.params.len() {
        let mut plus = net.clone();
        *plus.params.flat_mut(i) += h;
        let mut minus = net.clone();
        *minus.params.flat_mut(i) -= h;
        let fp = loss(&plus.forward(image).unwrap().0).0;
        let fm = loss(&minus.forward(image).unwrap().0).0;
        worst = worst.max(rel_err(analytic.flat(i), (fp - fm) / (2.0 * h)));
    }
    worst
}

/// A tiny network, an image, and seeded extras for one gradient check.
pub struct GradCase {
    pub net: Network,
    pub image: Image,
    pub rng: ChaCha8Rng,
}

impl GradCase {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6AD ^ seed);
        let net = Network::new(tiny_detector(), seed).unwrap();
        let image = random_image(TINY_SIDE, &mut rng);
        Self { net, image, rng }
    }

    fn grid(&self) -> (usize, usize) {
        (
            TINY_SIDE / self.net.config.stride,
            TINY_SIDE / self.net.config.stride,
        )
    }

    fn distinct_cells(&mut self, n: usize) -> Vec<(usize, usize)> {
        let (h, w) = self.grid();
        let mut all: Vec<(usize, usize)> = (0..h * w).map(|i| (i / w, i % w)).collect();
        for i in 0..n {
            let j = self.rng.random_range(i..all.len());
            all.swap(i, j);
        }
        all.truncate(n);
        all
    }
}

pub fn detection_grad_error(seed: u64) -> f64 {
    let mut case = GradCase::new(seed);
    let side = TINY_SIDE as f64;
    let gt: Vec<(BBox, usize)> = (0..3)
        .map(|k| {
            let (w, h) = (
                case.rng.random_range(8.0..side),
                case.rng.random_range(8.0..side),
            );
            let (x, y) = (
                case.rng.random_range(0.0..side - w),
                case.rng.random_range(0.0..side - h),
            );
            (BBox::new(x, y, x + w, y + h), k % 2)
        })
        .collect();
    let grid = case.grid();
    let stride = case.net.config.stride;
    let targets = assign_targets(&gt, grid, stride);
    assert!(targets.num_positive() > 0);
    network_grad_error(&case.net, &case.image, |out| {
        let l = detection_loss(out, &targets).unwrap();
        (l.total, l.grad)
    })
}

pub fn refine_grad_error(seed: u64) -> f64 {
    let mut case = GradCase::new(seed);
    let (_, w) = case.grid();
    let cells = case.distinct_cells(3);
    let instances: Vec<Instance> = cells
        .iter()
        .map(|&(r, c)| Instance {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            objectness: 1.0,
            label: Label::Unknown,
            embedding: vec![1.0, 0.0, 0.0, 0.0],
            cell: Some(r * w + c),
        })
        .collect();
    let pairs: Vec<PseudoPair> = (0..instances.len())
        .map(|k| PseudoPair {
            pred_index: k,
            target_box: random_box(TINY_SIDE as f64, &mut case.rng),
            match_iou: 0.5,
        })
        .collect();
    let cfg = RefineConfig::default();
    network_grad_error(&case.net, &case.image, |out| {
        refine_loss_dense(&pairs, &instances, out, &cfg).unwrap()
    })
}

pub fn transfer_grad_error(seed: u64, kind: LossKind) -> f64 {
    let mut case = GradCase::new(seed);
    let cells = case.distinct_cells(5);
    let teacher: Vec<Vec<f64>> = (0..cells.len())
        .map(|_| {
            unit(
                &(0..6)
                    .map(|_| case.rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let t = similarity_matrix(&teacher, SimilarityRole::Teacher);
    let cfg = TransferConfig {
        loss_kind: kind,
        temperature: 0.5,
        ..TransferConfig::default()
    };
    network_grad_error(&case.net, &case.image, |out| {
        let raw: Vec<Vec<f64>> = cells.iter().map(|&(r, c)| out.embedding_at(r, c)).collect();
        let (v, grads) = transfer_loss_embeddings(&t, &raw, &cfg).unwrap();
        let mut g = DenseGrad::zeros_like(out);
        for (&(r, c), gi) in cells.iter().zip(&grads) {
            for (k, x) in gi.iter().enumerate() {
                g.embeddings[[r, c, k]] += x;
            }
        }
        (v, g)
    })
}

/// Minimum-cost maximum-cardinality matching by exhaustive search.
///
/// Returns `(size, total cost)`; costs must be integers so sums are exact.
pub fn brute_force_assignment(c: &CostMatrix) -> (usize, f64) {
    fn go(
        c: &CostMatrix,
        row: usize,
        used: &mut Vec<bool>,
        size: usize,
        cost: f64,
        best: &mut (usize, f64),
    ) {
        if row == c.rows() {
            if size > best.0 || (size == best.0 && cost < best.1) {
                *best = (size, cost);
            }
            return;
        }
        go(c, row + 1, used, size, cost, best);
        for col in 0..c.cols() {
            if !used[col] && c.get(row, col) != FORBIDDEN {
                used[col] = true;
                go(c, row + 1, used, size + 1, cost + c.get(row, col), best);
                used[col] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(c, 0, &mut vec![false; c.cols()], 0, 0.0, &mut best);
    best
}

/// `(intersection, union, hull)` cell counts of two integer boxes on a raster.
pub fn raster_counts(a: &BBox, b: &BBox) -> (u64, u64, u64) {
    let (mut inter, mut union) = (0, 0);
    let inside = |bx: &BBox, x: f64, y: f64| bx.x1 <= x && x < bx.x2 && bx.y1 <= y && y < bx.y2;
    let (x0, x1) = (a.x1.min(b.x1) as i64, a.x2.max(b.x2) as i64);
    let (y0, y1) = (a.y1.min(b.y1) as i64, a.y2.max(b.y2) as i64);
    for y in y0..y1 {
        for x in x0..x1 {
            let (p, q) = (inside(a, x as f64, y as f64), inside(b, x as f64, y as f64));
            inter += (p && q) as u64;
            union += (p || q) as u64;
        }
    }
    (inter, union, ((x1 - x0) * (y1 - y0)) as u64)
}
