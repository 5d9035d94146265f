//! Train twice on a slender-heavy dataset — once with the learned-matching
//! objective, once with hard IoU assignment — and compare slender-subset AP.

use freeanchor::synthdata::{generate_dataset, DatasetSpec};
use freeanchor::trainer::{evaluate, train, LossMode, TrainConfig};

fn main() -> freeanchor::Result<()> {
    let spec = DatasetSpec {
        num_scenes: 60,
        square_frac: 0.3,
        slender_h_frac: 0.35,
        slender_v_frac: 0.35,
        seed: 17,
        ..DatasetSpec::default()
    };
    let scenes = generate_dataset(&spec)?;

    let mut config = TrainConfig::desk_default(spec.width, spec.height);
    config.iterations = 600;
    config.lr_milestones = vec![400, 520];
    config.seed = 17;

    for mode in [LossMode::FreeAnchor, LossMode::BaselineIou] {
        config.mode = mode;
        let result = train(&scenes, &config)?;
        let report = evaluate(&result.params, &scenes, &config.layout, 0.5)?;
        println!(
            "{mode:?}: AP {:.3}, slender AP {:?}, square AP {:?}",
            report.ap,
            report.slender_ap.map(|v| (v * 1000.0).round() / 1000.0),
            report.square_ap.map(|v| (v * 1000.0).round() / 1000.0),
        );
    }
    Ok(())
}
