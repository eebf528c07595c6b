//! Trains the four module combinations and prints the comparison table.
//!
//! `cargo run --release --example ablation -- [config.toml] [out_dir]`
//!
//! Defaults to `configs/benchmark.toml`, under a minute with `--release`.

use std::path::PathBuf;

use owd::cli::report;
use owd::trainer::{train, TrainConfig};

fn main() -> owd::Result<()> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let config = args.next().unwrap_or_else(|| {
        PathBuf::from(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../configs/benchmark.toml"
        ))
    });
    let out = args
        .next()
        .unwrap_or_else(|| std::env::temp_dir().join("owd-ablation"));
    let base = TrainConfig::load(&config)?;

    let mut runs = Vec::new();
    for (refine, transfer) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = TrainConfig {
            enable_refine: refine,
            enable_transfer: transfer,
            ..base.clone()
        };
        let dir = out.join(format!("refine-{refine}_transfer-{transfer}"));
        train(&cfg, &dir)?;
        runs.push(dir);
    }
    // Prints the table and writes it with a CSV and loss plots.
    report(&out.join("report"), &runs)?;
    Ok(())
}
