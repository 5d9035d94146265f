//! Finite-difference verification of the full pipeline gradient
//! (loss of forward) over random instances.
//!
//! The matching probabilities are recomputed once at the base point and held
//! fixed during perturbation, matching the stop-gradient boundary of the
//! training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{decode_deltas, BBox, GtBox};
use crate::loss::{free_anchor_loss, HyperParams};
use crate::matching::{build_anchor_bags, compute_match_probabilities, MatchProbabilities};
use crate::model::{backward, forward, init_params, ModelParams};

/// Relative-error floor: gradients below this magnitude are compared with an
/// absolute tolerance instead.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub max_rel_err: f64,
}

struct Instance {
    params: ModelParams,
    features: Vec<Vec<f64>>,
    gts: Vec<GtBox>,
    anchors: Vec<BBox>,
    hp: HyperParams,
}

fn random_instance(seed: u64, num_objects: usize, num_anchors: usize, k: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat_dim = 10;
    let hidden = 12;
    let mut params = init_params(feat_dim, k, hidden, 0.02, seed)?;
    // Perturb away from the symmetric init so logits and deltas vary.
    for v in params.b2.iter_mut() {
        *v += rng.gen_range(-0.5..0.5);
    }
    let features: Vec<Vec<f64>> = (0..num_anchors)
        .map(|_| (0..feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let gts: Vec<GtBox> = (0..num_objects)
        .map(|_| {
            let x1: f64 = rng.gen_range(0.0..48.0);
            let y1: f64 = rng.gen_range(0.0..48.0);
            GtBox {
                bbox: BBox::new(
                    x1,
                    y1,
                    x1 + rng.gen_range(4.0..16.0),
                    y1 + rng.gen_range(4.0..16.0),
                ),
                class: rng.gen_range(0..k),
            }
        })
        .collect();
    let anchors: Vec<BBox> = (0..num_anchors)
        .map(|_| {
            let x1: f64 = rng.gen_range(0.0..52.0);
            let y1: f64 = rng.gen_range(0.0..52.0);
            BBox::new(
                x1,
                y1,
                x1 + rng.gen_range(4.0..14.0),
                y1 + rng.gen_range(4.0..14.0),
            )
        })
        .collect();
    let hp = HyperParams {
        bag_size: 5,
        ..HyperParams::default()
    };
    Ok(Instance {
        params,
        features,
        gts,
        anchors,
        hp,
    })
}

fn pipeline_loss(inst: &Instance, params: &ModelParams, mp: &MatchProbabilities) -> Result<f64> {
    let preds = forward(params, &inst.features)?;
    let boxes: Vec<BBox> = inst.gts.iter().map(|g| g.bbox).collect();
    let bags = build_anchor_bags(&boxes, &inst.anchors, inst.hp.bag_size)?;
    Ok(free_anchor_loss(&preds, &inst.gts, &inst.anchors, &bags, mp, &inst.hp)?.total)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Check one random instance. `corrupt` deliberately damages one analytic
/// gradient entry; used as a negative control.
pub fn check_random_instance_opts(
    seed: u64,
    num_objects: usize,
    num_anchors: usize,
    k: usize,
    step: f64,
    corrupt: bool,
) -> Result<GradCheckReport> {
    let inst = random_instance(seed, num_objects, num_anchors, k)?;
    check_instance_inner(&inst, step, corrupt)
}

fn check_instance_inner(inst: &Instance, step: f64, corrupt: bool) -> Result<GradCheckReport> {
    let boxes: Vec<BBox> = inst.gts.iter().map(|g| g.bbox).collect();
    let bags = build_anchor_bags(&boxes, &inst.anchors, inst.hp.bag_size)?;

    // Stop-gradient boundary: matching probabilities from the base point.
    let preds0 = forward(&inst.params, &inst.features)?;
    let decoded: Vec<BBox> = inst
        .anchors
        .iter()
        .zip(&preds0.deltas)
        .map(|(a, d)| decode_deltas(a, d))
        .collect::<Result<Vec<BBox>>>()?;
    let mp = compute_match_probabilities(
        &bags,
        &decoded,
        &boxes,
        inst.hp.match_threshold,
        inst.anchors.len(),
    );

    let breakdown = free_anchor_loss(&preds0, &inst.gts, &inst.anchors, &bags, &mp, &inst.hp)?;
    let mut grads = backward(
        &inst.params,
        &inst.features,
        &breakdown.grad_logits,
        &breakdown.grad_deltas,
    );
    if corrupt {
        grads.w2[0] += 1.0;
    }

    let mut blocks = Vec::new();
    let mut params = inst.params.clone();
    let block_defs: [(&'static str, fn(&mut ModelParams) -> &mut Vec<f64>, &Vec<f64>); 4] = [
        ("w1", |p| &mut p.w1, &grads.w1),
        ("b1", |p| &mut p.b1, &grads.b1),
        ("w2", |p| &mut p.w2, &grads.w2),
        ("b2", |p| &mut p.b2, &grads.b2),
    ];
    for (name, getter, analytic) in block_defs {
        let mut max_err: f64 = 0.0;
        let len = getter(&mut params).len();
        for idx in 0..len {
            let orig = getter(&mut params)[idx];
            getter(&mut params)[idx] = orig + step;
            let up = pipeline_loss(&inst, &params, &mp)?;
            getter(&mut params)[idx] = orig - step;
            let down = pipeline_loss(&inst, &params, &mp)?;
            getter(&mut params)[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic[idx], numeric));
        }
        blocks.push(BlockReport {
            name,
            max_rel_err: max_err,
        });
    }
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0f64, f64::max);
    Ok(GradCheckReport {
        blocks,
        max_rel_err,
    })
}

/// Check analytic gradients for an explicit instance (e.g. a live training
/// state) instead of a randomly generated one. Returns the max relative
/// error over all parameter blocks.
pub fn check_instance(
    params: &ModelParams,
    features: &[Vec<f64>],
    gts: &[GtBox],
    anchors: &[BBox],
    hp: &HyperParams,
    step: f64,
) -> Result<f64> {
    let inst = Instance {
        params: params.clone(),
        features: features.to_vec(),
        gts: gts.to_vec(),
        anchors: anchors.to_vec(),
        hp: hp.clone(),
    };
    Ok(check_instance_inner(&inst, step, false)?.max_rel_err)
}

pub fn check_random_instance(
    seed: u64,
    num_objects: usize,
    num_anchors: usize,
    k: usize,
    step: f64,
) -> Result<GradCheckReport> {
    check_random_instance_opts(seed, num_objects, num_anchors, k, step, false)
}

/// Run the full suite: `instances` random instances spanning 2-4 objects,
/// 20-100 anchors, and k in {1, 3}. Returns the per-instance reports.
pub fn run_suite(seed: u64, instances: usize, step: f64, corrupt: bool) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(instances);
    for i in 0..instances {
        let num_objects = rng.gen_range(2..=4);
        let num_anchors = rng.gen_range(20..=100);
        let k = if rng.gen() { 1 } else { 3 };
        out.push(check_random_instance_opts(
            seed.wrapping_add(i as u64).wrapping_mul(2654435761),
            num_objects,
            num_anchors,
            k,
            step,
            corrupt && i == 0,
        )?);
    }
    Ok(out)
}
