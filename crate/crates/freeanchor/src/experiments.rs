//! Canned paired experiments: train the learned-matching objective and the
//! hard-assignment baseline identically on the same dataset, then evaluate
//! both. Used by the verification suite and the comparison examples.

use crate::error::Result;
use crate::eval::EvalReport;
use crate::synthdata::{generate_dataset, DatasetSpec};
use crate::trainer::{evaluate, train, LossMode, TrainConfig};

/// Evaluation of the two objectives trained under identical settings.
#[derive(Debug, Clone)]
pub struct ComparisonOutcome {
    pub free_anchor: EvalReport,
    pub baseline: EvalReport,
}

impl ComparisonOutcome {
    /// AP gap (learned matching minus baseline) per crowdedness bucket,
    /// in bucket order 1, 2-3, 4-6. Missing buckets read as zero.
    pub fn crowd_gaps(&self) -> [f64; 3] {
        let gap = |k: &str| {
            self.free_anchor.crowdedness_ap.get(k).copied().unwrap_or(0.0)
                - self.baseline.crowdedness_ap.get(k).copied().unwrap_or(0.0)
        };
        [gap("1"), gap("2-3"), gap("4-6")]
    }
}

/// Train both objectives on `spec`'s dataset with the given budget and
/// evaluate on the same set.
pub fn paired_comparison(
    spec: &DatasetSpec,
    seed: u64,
    iterations: usize,
    learning_rate: f64,
    bag_size: usize,
) -> Result<ComparisonOutcome> {
    let scenes = generate_dataset(spec)?;
    let mut config = TrainConfig::desk_default(spec.width, spec.height);
    config.iterations = iterations;
    config.lr_milestones = vec![iterations * 6 / 10, iterations * 8 / 10];
    config.seed = seed;
    config.hp.learning_rate = learning_rate;
    config.hp.bag_size = bag_size;

    config.mode = LossMode::FreeAnchor;
    let free_result = train(&scenes, &config)?;
    let free_anchor = evaluate(&free_result.params, &scenes, &config.layout, 0.5)?;

    config.mode = LossMode::BaselineIou;
    let base_result = train(&scenes, &config)?;
    let baseline = evaluate(&base_result.params, &scenes, &config.layout, 0.5)?;

    Ok(ComparisonOutcome {
        free_anchor,
        baseline,
    })
}

/// Dataset of exclusively slender objects (aspect ratio 4-6), where the
/// hard IoU assignment finds essentially no positive anchors.
pub fn slender_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_scenes: 500,
        square_frac: 0.0,
        slender_h_frac: 0.5,
        slender_v_frac: 0.5,
        slender_aspect: (4.0, 6.0),
        max_objects: 3,
        seed,
        ..DatasetSpec::default()
    }
}

/// Mixed-shape dataset with 1-6 objects per scene, populating all three
/// crowdedness buckets.
pub fn crowded_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_scenes: 300,
        square_frac: 0.5,
        slender_h_frac: 0.25,
        slender_v_frac: 0.25,
        slender_aspect: (4.0, 6.0),
        min_objects: 1,
        max_objects: 6,
        seed,
        ..DatasetSpec::default()
    }
}

/// Mixed test set used for the NMS-recall comparison.
pub fn mixed_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_scenes: 250,
        square_frac: 0.6,
        slender_h_frac: 0.2,
        slender_v_frac: 0.2,
        slender_aspect: (4.0, 6.0),
        min_objects: 1,
        max_objects: 5,
        seed,
        ..DatasetSpec::default()
    }
}

pub fn slender_comparison(seed: u64) -> Result<ComparisonOutcome> {
    paired_comparison(&slender_spec(1000 + seed), seed, 800, 0.03, 8)
}

pub fn crowded_comparison(seed: u64) -> Result<ComparisonOutcome> {
    paired_comparison(&crowded_spec(2000 + seed), seed, 800, 0.03, 8)
}

pub fn mixed_comparison(seed: u64) -> Result<ComparisonOutcome> {
    paired_comparison(&mixed_spec(3000 + seed), seed, 600, 0.03, 8)
}
