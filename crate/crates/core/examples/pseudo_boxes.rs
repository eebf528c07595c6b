//! Turns class-agnostic masks into box targets for unknown-object detections.
//!
//! Known objects are excluded, remaining detections are matched one-to-one
//! to mask boxes, and the refinement loss is evaluated on the matches.
//!
//! `cargo run --example pseudo_boxes -- [seed]`

use owd::detector::{Instance, Label};
use owd::geometry::BBox;
use owd::synthdata::{generate_scene, oracle_segmenter, SceneSpec, SegmenterConfig};
use owd::unknown_refine::{
    build_pseudo_targets, refine_loss, select_unknown_candidates, RefineConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> owd::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let scene = generate_scene(seed, &SceneSpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Stand-in detections: every object's box, jittered by a few pixels.
    let detections: Vec<Instance> = scene
        .records
        .iter()
        .map(|r| {
            let j: [f64; 4] = std::array::from_fn(|_| rng.random_range(-4.0..4.0));
            Instance {
                bbox: BBox::new(
                    r.bbox.x1 + j[0],
                    r.bbox.y1 + j[1],
                    r.bbox.x2 + j[2],
                    r.bbox.y2 + j[3],
                ),
                objectness: rng.random_range(0.3..1.0),
                label: Label::Unknown,
                embedding: Vec::new(),
                cell: None,
            }
        })
        .collect();

    let cfg = RefineConfig::default();
    let masks = oracle_segmenter(&scene.records, scene.image_id, &SegmenterConfig::default());
    let candidates = select_unknown_candidates(&detections, &scene.known_boxes(), &cfg);
    let targets = build_pseudo_targets(&detections, &candidates, &masks, &cfg);
    println!(
        "{} detections, {} unknown candidates, {} masks, {} pairs",
        detections.len(),
        candidates.len(),
        masks.len(),
        targets.pairs.len()
    );
    for p in &targets.pairs {
        println!(
            "  detection {} -> {:?} (IoU {:.3})",
            p.pred_index, p.target_box, p.match_iou
        );
    }

    let predicted: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();
    let diag = (scene.image.width as f64).hypot(scene.image.height as f64);
    let loss = refine_loss(&targets.pairs, &predicted, diag, &cfg)?;
    println!("refinement loss {:.4}", loss.value);
    Ok(())
}
