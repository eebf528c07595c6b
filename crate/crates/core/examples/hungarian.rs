//! Optimal assignment with forbidden pairs, against a greedy baseline.
//!
//! `cargo run --example hungarian`

use owd::assignment::{greedy_match, hungarian, CostMatrix, FORBIDDEN};
use owd::geometry::{iou, BBox};

fn main() -> owd::Result<()> {
    // Prediction 0 overlaps both targets; prediction 1 only the first.
    let predictions = [
        BBox::new(10.0, 10.0, 40.0, 40.0),
        BBox::new(4.0, 10.0, 34.0, 40.0),
    ];
    let targets = [
        BBox::new(8.0, 10.0, 38.0, 40.0),
        BBox::new(14.0, 10.0, 44.0, 40.0),
    ];

    let ious: Vec<Vec<f64>> = predictions
        .iter()
        .map(|p| targets.iter().map(|t| iou(p, t)).collect())
        .collect();
    for (i, row) in ious.iter().enumerate() {
        println!("prediction {i}: IoU {row:.3?}");
    }

    // Pairs below 0.5 IoU may not match at all.
    let cost = CostMatrix::from_fn(predictions.len(), targets.len(), |r, c| {
        if ious[r][c] >= 0.5 {
            1.0 - ious[r][c]
        } else {
            FORBIDDEN
        }
    });
    let optimal = hungarian(&cost);
    let greedy = greedy_match(&ious, 0.5);
    let total = |m: &[(usize, usize)]| m.iter().map(|&(r, c)| ious[r][c]).sum::<f64>();
    println!("hungarian {optimal:?} total IoU {:.3}", total(&optimal));
    println!("greedy    {greedy:?} total IoU {:.3}", total(&greedy));
    Ok(())
}
