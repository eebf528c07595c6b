//! Clusters the embeddings of unknown objects and scores the clusters against
//! their hidden categories, with and without embedding transfer.
//!
//! `cargo run --release --example discover_classes -- [config.toml]`

use std::path::PathBuf;

use owd::cli::load_network;
use owd::evaluation::{clustering_quality, unknown_embeddings};
use owd::trainer::{load_splits, train, TrainConfig};

fn main() -> owd::Result<()> {
    let config = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(concat!(
                env!("CARGO_MANIFEST_DIR"),
                "/../../configs/benchmark.toml"
            ))
        });
    let base = TrainConfig::load(&config)?;
    let (roster, _, _, test) = load_splits(&base)?;
    let k = roster.num_unknown();

    for transfer in [false, true] {
        let cfg = TrainConfig {
            enable_transfer: transfer,
            ..base.clone()
        };
        let dir = std::env::temp_dir().join(format!("owd-discover-{transfer}"));
        let m = train(&cfg, &dir)?;
        let net = load_network(&dir.join(&m.checkpoint), &roster)?;
        let (embeddings, labels) = unknown_embeddings(&net, &test)?;
        let q = clustering_quality(&embeddings, &labels, k, cfg.seed)?;
        println!(
            "transfer {:<5}: {} unknown objects in {k} clusters, NMI {:.3}, purity {:.3}",
            transfer,
            embeddings.len(),
            q.nmi,
            q.purity
        );
    }
    Ok(())
}
