//! Watch anchor-object matching sharpen during training: for one scene,
//! print how concentrated each object's match distribution is at a few
//! checkpoints.

use freeanchor::synthdata::{generate_dataset, DatasetSpec};
use freeanchor::trainer::{trace_matching, train, TrainConfig};

fn main() -> freeanchor::Result<()> {
    let spec = DatasetSpec {
        num_scenes: 20,
        seed: 5,
        ..DatasetSpec::default()
    };
    let scenes = generate_dataset(&spec)?;

    let mut config = TrainConfig::desk_default(spec.width, spec.height);
    config.iterations = 900;
    config.lr_milestones = vec![600, 800];
    config.seed = 5;
    config.hp.learning_rate = 0.1;
    config.hp.bag_size = 8;
    config.snapshot_every = Some(300);
    let result = train(&scenes, &config)?;

    let scene = &scenes[0];
    let rows = trace_matching(&result.snapshots, scene, &config.layout, &config.hp)?;
    println!("scene {} with {} objects", scene.id, scene.objects.len());
    for ckpt in &result.snapshots {
        for object in 0..scene.objects.len() {
            let bag: Vec<_> = rows
                .iter()
                .filter(|r| r.iteration == ckpt.iteration && r.object_index == object)
                .collect();
            let peak_p = bag.iter().map(|r| r.match_probability).fold(0.0f64, f64::max);
            let mass: f64 = bag.iter().map(|r| r.match_probability).sum();
            let peak_c = bag.iter().map(|r| r.confidence).fold(0.0f64, f64::max);
            println!(
                "iteration {:4}, object {object}: peak confidence {peak_c:.4}, peak match prob {peak_p:.3}, mass {mass:.3} over {} anchors",
                ckpt.iteration,
                bag.len()
            );
        }
    }
    Ok(())
}
