//! Relational embedding transfer: the student matches the teacher's pairwise
//! similarity structure, not its coordinates.
//!
//! `cargo run --example relational_transfer`

use owd::embed_transfer::{
    similarity_matrix, transfer_loss, LossKind, SimilarityRole, TransferConfig,
};

fn rotate(v: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

fn main() -> owd::Result<()> {
    let teacher: Vec<Vec<f64>> = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.96, 0.28, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![0.0, 0.6, 0.8],
    ];
    let t = similarity_matrix(&teacher, SimilarityRole::Teacher);

    let rotated: Vec<Vec<f64>> = teacher.iter().map(|v| rotate(v, 1.1)).collect();
    let shuffled: Vec<Vec<f64>> = vec![
        teacher[2].clone(),
        teacher[0].clone(),
        teacher[3].clone(),
        teacher[1].clone(),
    ];

    for kind in [LossKind::RowKl, LossKind::MatrixMse] {
        let cfg = TransferConfig {
            loss_kind: kind,
            ..TransferConfig::default()
        };
        for (name, student) in [("rotated copy", &rotated), ("shuffled rows", &shuffled)] {
            let s = similarity_matrix(student, SimilarityRole::Student);
            println!(
                "{kind:?} {name:<14} loss {:.5}",
                transfer_loss(&t, &s, &cfg)?.value
            );
        }
    }
    Ok(())
}
