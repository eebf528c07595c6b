//! Appearance tracking on synthetic sequences with oracle detections.
//!
//! `cargo run --example track_sequences -- [sequences] [length]`

use owd::evaluation::{tracking_metrics, TrackingMetrics};
use owd::synthdata::{OracleTeacher, SceneSpec, TeacherConfig};
use owd::tracker::{
    gt_track_boxes, oracle_detections, run_detections, TrackerConfig, TrackingConfig,
};

fn main() -> owd::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().ok());
    let tracking = TrackingConfig {
        sequences: args.next().flatten().unwrap_or(4),
        length: args.next().flatten().unwrap_or(20),
        ..TrackingConfig::default()
    };
    let spec = SceneSpec::default();
    let teacher = OracleTeacher::new(&spec.roster, TeacherConfig::default())?;

    let mut per_sequence = Vec::new();
    for (i, frames) in tracking.generate(&spec)?.iter().enumerate() {
        let detections = oracle_detections(frames, &teacher, &spec.roster)?;
        let run = run_detections(&detections, &TrackerConfig::default())?;
        let m = tracking_metrics(&run.track_boxes(), &gt_track_boxes(frames))?;
        let born: usize = run.log.iter().map(|f| f.born.len()).sum();
        println!(
            "sequence {i}: {born} tracks born, {} id switches, idf1 {:.3}",
            m.id_switches, m.idf1_like
        );
        per_sequence.push(m);
    }
    let all = TrackingMetrics::pooled(&per_sequence);
    println!(
        "pooled: {} id switches, idf1 {:.3}, precision {:.3}, recall {:.3}",
        all.id_switches, all.idf1_like, all.precision, all.recall
    );
    Ok(())
}
