//! Box and mask arithmetic.
//!
//! Coordinates are continuous pixels with the origin at the top-left corner.
//! Right and bottom edges are exclusive, so the pixel at row `r`, column `c`
//! occupies the box `(c, r, c + 1, r + 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box from COCO `[x, y, w, h]`.
    pub fn from_xywh(xywh: [f64; 4]) -> Self {
        Self::new(xywh[0], xywh[1], xywh[0] + xywh[2], xywh[1] + xywh[3])
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.width() * self.height()).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    /// Clamps into `[0, width] x [0, height]`. Idempotent.
    pub fn clamp(&self, width: f64, height: f64) -> Self {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(x1, width);
        let y2 = self.y2.clamp(y1, height);
        Self::new(x1, y1, x2, y2)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    fn hull(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalized IoU: `iou - (hull - union) / hull`. Zero when the hull is empty.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_with_grad(a, b).0
}

/// GIoU together with its gradient with respect to the four coordinates of `a`.
///
/// At ties between min/max arguments the subgradient of the `a` side is used.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let (aw, ah) = (a.width().max(0.0), a.height().max(0.0));
    let area_a = aw * ah;
    let area_b = b.area();

    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let union = area_a + area_b - inter;

    let hull = a.hull(b);
    let cw = hull.width();
    let ch = hull.height();
    let c = cw * ch;
    if c <= 0.0 {
        return (0.0, [0.0; 4]);
    }

    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let value = iou - (c - union) / c;

    // d(area_a)
    let d_area = [-ah, -aw, ah, aw];
    // d(inter)
    let mut d_inter = [0.0; 4];
    if overlapping {
        if a.x1 >= b.x1 {
            d_inter[0] = -ih;
        }
        if a.y1 >= b.y1 {
            d_inter[1] = -iw;
        }
        if a.x2 <= b.x2 {
            d_inter[2] = ih;
        }
        if a.y2 <= b.y2 {
            d_inter[3] = iw;
        }
    }
    // d(hull)
    let mut d_hull = [0.0; 4];
    if a.x1 <= b.x1 {
        d_hull[0] = -ch;
    }
    if a.y1 <= b.y1 {
        d_hull[1] = -cw;
    }
    if a.x2 >= b.x2 {
        d_hull[2] = ch;
    }
    if a.y2 >= b.y2 {
        d_hull[3] = cw;
    }

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = if union > 0.0 {
            d_inter[k] / union - inter * d_union / (union * union)
        } else {
            0.0
        };
        // value = iou - 1 + union / c
        grad[k] = d_iou + d_union / c - union * d_hull[k] / (c * c);
    }
    (value, grad)
}

/// H x W occupancy grid stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn from_cells(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} given {} cells",
                height,
                width,
                cells.len()
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.cells[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    /// Square-neighbourhood dilation with radius `r` (Chebyshev distance).
    pub fn dilate(&self, r: usize) -> Self {
        self.morph(r, true)
    }

    /// Square-neighbourhood erosion with radius `r`. Pixels outside the grid count as empty.
    pub fn erode(&self, r: usize) -> Self {
        self.morph(r, false)
    }

    fn morph(&self, r: usize, dilate: bool) -> Self {
        if r == 0 {
            return self.clone();
        }
        let (h, w) = (self.height as isize, self.width as isize);
        let r = r as isize;
        let mut out = Self::zeros(self.height, self.width);
        for y in 0..h {
            for x in 0..w {
                let mut any = false;
                let mut all = true;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        let v = yy >= 0
                            && yy < h
                            && xx >= 0
                            && xx < w
                            && self.cells[(yy * w + xx) as usize];
                        any |= v;
                        all &= v;
                    }
                }
                out.cells[(y * w + x) as usize] = if dilate { any } else { all };
            }
        }
        out
    }
}

/// Tightest box covering every nonzero cell, with exclusive right/bottom edges.
pub fn mask_to_box(mask: &BinaryMask) -> Result<BBox> {
    let mut min_r = usize::MAX;
    let mut min_c = usize::MAX;
    let mut max_r = 0;
    let mut max_c = 0;
    for r in 0..mask.height {
        let row = &mask.cells[r * mask.width..(r + 1) * mask.width];
        let Some(first) = row.iter().position(|&c| c) else {
            continue;
        };
        let last = row.iter().rposition(|&c| c).unwrap_or(first);
        min_r = min_r.min(r);
        max_r = r;
        min_c = min_c.min(first);
        max_c = max_c.max(last);
    }
    if min_r == usize::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(BBox::new(
        min_c as f64,
        min_r as f64,
        (max_c + 1) as f64,
        (max_r + 1) as f64,
    ))
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited in `(score desc, index asc)` order; a candidate is kept
/// when its IoU with every previously kept box is at most `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh)
        {
            keep.push(i);
        }
    }
    keep
}
