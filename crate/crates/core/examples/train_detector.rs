//! Trains a detector from a TOML config and prints its loss curve.
//!
//! `cargo run --release --example train_detector -- [config.toml] [out_dir]`
//!
//! Defaults to `configs/tiny.toml`, which finishes in seconds.

use std::path::PathBuf;

use owd::evaluation::MetricReport;
use owd::trainer::{train, TrainConfig};

fn main() -> owd::Result<()> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let config = args.next().unwrap_or_else(|| {
        PathBuf::from(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../configs/tiny.toml"
        ))
    });
    let out = args
        .next()
        .unwrap_or_else(|| std::env::temp_dir().join("owd-train-detector"));
    let mut cfg = TrainConfig::load(&config)?;
    cfg.enable_refine = true;
    cfg.enable_transfer = true;

    let m = train(&cfg, &out)?;
    println!("epoch  total   det     refine  transfer  val U-Recall");
    for e in &m.curve {
        println!(
            "{:>5}  {:.4}  {:.4}  {:.4}  {:.4}    {:.3}",
            e.epoch, e.loss.total, e.loss.detection, e.loss.refine, e.loss.transfer, e.val_u_recall
        );
    }
    let r = MetricReport::load(&out.join(&m.metric_report))?;
    println!(
        "best epoch {}: test mAP {:.3}, U-Recall {:.3}, unknown NMI {:.3}",
        m.best_epoch,
        r.map.unwrap_or(0.0),
        r.u_recall.unwrap_or(0.0),
        r.unknown_nmi.unwrap_or(0.0)
    );
    println!("run written to {}", out.display());
    Ok(())
}
