use crate::geometry::BBox;

/// Regression and classification target for a positive cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub class: usize,
    /// `(l, t, r, b)` distances from the cell centre to the gt box edges.
    pub offsets: [f64; 4],
    pub gt_index: usize,
    pub gt_box: BBox,
}

/// Per-cell assignment; `None` marks a negative cell.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    pub grid: (usize, usize),
    pub stride: usize,
    pub cells: Vec<Option<CellTarget>>,
}

impl TargetMap {
    pub fn get(&self, row: usize, col: usize) -> Option<&CellTarget> {
        self.cells[row * self.grid.1 + col].as_ref()
    }

    pub fn num_positive(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize, &CellTarget)> + '_ {
        let wf = self.grid.1;
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| c.as_ref().map(|t| (i / wf, i % wf, t)))
    }
}

/// Centre-sampling assignment.
///
/// A cell is positive for the smallest-area gt box whose central half (half
/// the width and half the height, same centre) contains the cell centre.
/// Area ties go to the lower gt index.
pub fn assign_targets(gt: &[(BBox, usize)], grid: (usize, usize), stride: usize) -> TargetMap {
    let (hf, wf) = grid;
    let s = stride as f64;
    let mut cells = vec![None; hf * wf];
    for r in 0..hf {
        for c in 0..wf {
            let (cx, cy) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
            let mut best: Option<(f64, usize)> = None;
            for (g, (b, _)) in gt.iter().enumerate() {
                let (bx, by) = b.center();
                let (hw, hh) = (0.25 * b.width(), 0.25 * b.height());
                let region = BBox::new(bx - hw, by - hh, bx + hw, by + hh);
                if region.contains_point(cx, cy) && best.is_none_or(|(a, _)| b.area() < a) {
                    best = Some((b.area(), g));
                }
            }
            cells[r * wf + c] = best.map(|(_, g)| {
                let (b, class) = gt[g];
                CellTarget {
                    class,
                    offsets: [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy],
                    gt_index: g,
                    gt_box: b,
                }
            });
        }
    }
    TargetMap {
        grid,
        stride,
        cells,
    }
}
