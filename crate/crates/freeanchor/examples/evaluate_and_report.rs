//! Produce a full evaluation report — overall and per-class AP, shape and
//! crowdedness breakdowns, NMS recall — as pretty-printed JSON.

use freeanchor::synthdata::{generate_dataset, DatasetSpec};
use freeanchor::trainer::{evaluate, train, TrainConfig};

fn main() -> freeanchor::Result<()> {
    let spec = DatasetSpec {
        num_scenes: 40,
        max_objects: 6,
        seed: 29,
        ..DatasetSpec::default()
    };
    let scenes = generate_dataset(&spec)?;

    let mut config = TrainConfig::desk_default(spec.width, spec.height);
    config.iterations = 400;
    config.lr_milestones = vec![300];
    config.seed = 29;
    let result = train(&scenes, &config)?;

    let report = evaluate(&result.params, &scenes, &config.layout, 0.5)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
