//! Train the detection head with the learned-matching objective and print
//! the loss trajectory plus the final evaluation.

use freeanchor::synthdata::{generate_dataset, DatasetSpec};
use freeanchor::trainer::{evaluate, train, TrainConfig};

fn main() -> freeanchor::Result<()> {
    let spec = DatasetSpec {
        num_scenes: 60,
        seed: 3,
        ..DatasetSpec::default()
    };
    let scenes = generate_dataset(&spec)?;

    let mut config = TrainConfig::desk_default(spec.width, spec.height);
    config.iterations = 600;
    config.lr_milestones = vec![400, 520];
    config.seed = 3;

    let result = train(&scenes, &config)?;
    assert!(result.diverged_at.is_none());
    for row in result.log.iter().step_by(100) {
        println!(
            "iter {:4}  loss {:.4}  (recall {:.4}, background {:.4})",
            row.iteration, row.total, row.recall_term, row.background_term
        );
    }

    let report = evaluate(&result.params, &scenes, &config.layout, 0.5)?;
    println!("AP {:.3}  AP50 {:.3}  AP75 {:.3}", report.ap, report.ap50, report.ap75);
    Ok(())
}
