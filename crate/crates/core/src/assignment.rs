//! Bipartite matching: optimal (Hungarian) and greedy.

use std::cmp::Ordering;
use std::ops::{Add, Sub};

use crate::error::{Error, Result};

/// Marks a pair that may never be assigned.
pub const FORBIDDEN: f64 = f64::INFINITY;

/// Dense row-major cost matrix. Entries are finite costs or [`FORBIDDEN`].
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "cost matrix {rows}x{cols} given {} entries",
                data.len()
            )));
        }
        if data.iter().any(|&c| c.is_nan() || c == f64::NEG_INFINITY) {
            return Err(Error::NonFinite("cost matrix".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn is_forbidden(&self, row: usize, col: usize) -> bool {
        self.get(row, col) == FORBIDDEN
    }

    /// Sum of costs over `pairs`.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

/// Lexicographic cost: forbidden-edge count first, then real cost.
#[derive(Clone, Copy, Debug, PartialEq)]
struct LexCost {
    forbidden: i64,
    cost: f64,
}

impl LexCost {
    const ZERO: LexCost = LexCost {
        forbidden: 0,
        cost: 0.0,
    };
    const INF: LexCost = LexCost {
        forbidden: i64::MAX / 4,
        cost: 0.0,
    };

    fn of(c: f64) -> Self {
        if c == FORBIDDEN {
            LexCost {
                forbidden: 1,
                cost: 0.0,
            }
        } else {
            LexCost {
                forbidden: 0,
                cost: c,
            }
        }
    }

    fn lt(&self, other: &LexCost) -> bool {
        match self.forbidden.cmp(&other.forbidden) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => self.cost < other.cost,
        }
    }
}

impl Add for LexCost {
    type Output = LexCost;
    fn add(self, o: LexCost) -> LexCost {
        LexCost {
            forbidden: self.forbidden + o.forbidden,
            cost: self.cost + o.cost,
        }
    }
}

impl Sub for LexCost {
    type Output = LexCost;
    fn sub(self, o: LexCost) -> LexCost {
        LexCost {
            forbidden: self.forbidden - o.forbidden,
            cost: self.cost - o.cost,
        }
    }
}

/// Minimum-cost maximum-size matching.
///
/// Among all matchings that use only non-forbidden pairs, returns one of maximum
/// size and, among those, minimum total cost. Rectangular matrices are handled
/// directly. Pairs are returned sorted by row. Ties are broken by scanning
/// rows and columns in ascending order.
pub fn hungarian(c: &CostMatrix) -> Vec<(usize, usize)> {
    if c.rows == 0 || c.cols == 0 {
        return Vec::new();
    }
    let transposed = c.rows > c.cols;
    let (n, m) = if transposed {
        (c.cols, c.rows)
    } else {
        (c.rows, c.cols)
    };
    let cost = |i: usize, j: usize| -> LexCost {
        if transposed {
            LexCost::of(c.get(j, i))
        } else {
            LexCost::of(c.get(i, j))
        }
    };

    // Shortest augmenting path with potentials; 1-based with slot 0 as the virtual source.
    let mut u = vec![LexCost::ZERO; n + 1];
    let mut v = vec![LexCost::ZERO; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![LexCost::INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = LexCost::INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur.lt(&minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j].lt(&delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| {
            if transposed {
                (j - 1, p[j] - 1)
            } else {
                (p[j] - 1, j - 1)
            }
        })
        .filter(|&(r, col)| !c.is_forbidden(r, col))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Greedy matching on similarity `scores` (row-major `rows x cols`).
///
/// Repeatedly takes the highest remaining score `>= thresh` whose row and column
/// are both unmatched; equal scores are taken in `(row, col)` order.
pub fn greedy_match(scores: &[Vec<f64>], thresh: f64) -> Vec<(usize, usize)> {
    let mut entries: Vec<(f64, usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &s)| (s, r, c)))
        .filter(|&(s, _, _)| s >= thresh)
        .collect();
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let rows = scores.len();
    let cols = scores.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cols];
    let mut out = Vec::new();
    for (_, r, c) in entries {
        if !row_used[r] && !col_used[c] {
            row_used[r] = true;
            col_used[c] = true;
            out.push((r, c));
        }
    }
    out
}
