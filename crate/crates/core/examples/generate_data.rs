//! Renders a small synthetic dataset and writes it in the annotation format.
//!
//! `cargo run --example generate_data -- [out_dir] [seed]`

use std::path::PathBuf;

use owd::cli::DatasetCounts;
use owd::synthdata::{generate_scenes, load_dataset, serialize_dataset, Dataset, SceneSpec};

fn main() -> owd::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("owd-generate-data"));
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let spec = SceneSpec::default();
    let scenes = generate_scenes(seed, 0, 12, &spec)?;
    let c = DatasetCounts::of(&scenes);
    println!(
        "{} images, {} objects ({} known, {} unknown)",
        c.images, c.instances, c.known, c.unknown
    );
    for cat in &spec.roster.categories {
        println!("  {:>2} {:<16} {:?}", cat.id, cat.name, cat.split);
    }

    let dataset = Dataset {
        roster: spec.roster.clone(),
        scenes,
    };
    serialize_dataset(&dataset, &out)?;
    assert_eq!(load_dataset(&out)?, dataset);
    println!("wrote {} and read it back unchanged", out.display());
    Ok(())
}
