//! Synthesize a small dataset, save it as gzipped JSON lines, and print a
//! short census of what was generated.

use freeanchor::synthdata::{generate_dataset, load_dataset, save_dataset, DatasetSpec};

fn main() -> freeanchor::Result<()> {
    let spec = DatasetSpec {
        num_scenes: 50,
        slender_h_frac: 0.15,
        slender_v_frac: 0.15,
        square_frac: 0.7,
        max_objects: 5,
        seed: 7,
        ..DatasetSpec::default()
    };
    let scenes = generate_dataset(&spec)?;

    let dir = std::env::temp_dir().join("freeanchor-examples");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("dataset.jsonl.gz");
    save_dataset(&path, &scenes)?;
    let reloaded = load_dataset(&path)?;
    assert_eq!(scenes.len(), reloaded.len());

    let total: usize = scenes.iter().map(|s| s.objects.len()).sum();
    let slender = scenes
        .iter()
        .flat_map(|s| &s.objects)
        .filter(|o| o.bbox.elongation() >= 3.0)
        .count();
    println!("wrote {} scenes to {}", scenes.len(), path.display());
    println!("{total} objects total, {slender} slender (aspect >= 3)");
    for scene in scenes.iter().take(3) {
        println!(
            "scene {}: {} objects, crowdedness {}",
            scene.id,
            scene.objects.len(),
            scene.crowdedness()
        );
    }
    Ok(())
}
