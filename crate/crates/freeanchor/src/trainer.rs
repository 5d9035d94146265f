//! Training loop: forward over a mini-batch, anchor-bag construction,
//! loss evaluation, backward propagation, and a plain SGD update with
//! milestone learning-rate decay. Also hosts inference and the per-anchor
//! matching trace used to inspect learning-to-match behavior.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{apply_nms, breakdown_report, cap_detections, Detection, EvalReport};
use crate::geometry::{decode_deltas, generate_anchors, AnchorLayout, BBox, GtBox};
use crate::loss::{
    baseline_loss, free_anchor_loss, log_cls_confidence, HyperParams, LossBreakdown, Predictions,
};
use crate::matching::{
    build_anchor_bags, build_iou_assignment, compute_match_probabilities, AnchorBag, MatchMatrix,
};
use crate::model::{
    backward, extract_features, forward, init_params, sgd_step, Checkpoint, ModelParams,
    ParamGrads, DEFAULT_HIDDEN, DEFAULT_PRIOR, FEATURE_DIM,
};
use crate::synthdata::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    FreeAnchor,
    BaselineIou,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free_anchor" => Ok(LossMode::FreeAnchor),
            "baseline_iou" => Ok(LossMode::BaselineIou),
            other => Err(Error::Config(format!("unknown loss mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hp: HyperParams,
    pub mode: LossMode,
    pub iterations: usize,
    pub batch_size: usize,
    /// Iterations at which the learning rate is divided by 10.
    pub lr_milestones: Vec<usize>,
    pub seed: u64,
    pub hidden_dim: usize,
    pub layout: AnchorLayout,
    /// Emit a parameter snapshot every this many iterations (plus the final).
    pub snapshot_every: Option<usize>,
}

impl TrainConfig {
    /// Desk-scale defaults for a given image size.
    pub fn desk_default(image_width: usize, image_height: usize) -> Self {
        TrainConfig {
            hp: HyperParams {
                bag_size: 16,
                learning_rate: 0.02,
                ..HyperParams::default()
            },
            mode: LossMode::FreeAnchor,
            iterations: 2000,
            batch_size: 8,
            lr_milestones: vec![1200, 1600],
            seed: 0,
            hidden_dim: DEFAULT_HIDDEN,
            layout: AnchorLayout {
                strides: vec![8, 16],
                scales: vec![2.0, 3.0],
                ratios: vec![0.5, 1.0, 2.0],
                image_width,
                image_height,
            },
            snapshot_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub recall_term: f64,
    pub background_term: f64,
    pub grad_norm_cls: f64,
    pub grad_norm_loc: f64,
}

impl LogRow {
    pub fn csv_header() -> &'static str {
        "iteration,learning_rate,total_loss,recall_term,background_term,grad_norm_cls,grad_norm_loc"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.learning_rate,
            self.total,
            self.recall_term,
            self.background_term,
            self.grad_norm_cls,
            self.grad_norm_loc
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    pub snapshots: Vec<Checkpoint>,
    /// Set when a non-finite loss aborted training; `params` then holds the
    /// last good state.
    pub diverged_at: Option<usize>,
}

/// Per-scene quantities that do not depend on the parameters.
pub struct PreparedScene {
    pub scene_id: u64,
    pub features: Vec<Vec<f64>>,
    pub gts: Vec<GtBox>,
    pub boxes: Vec<BBox>,
    pub bags: Vec<AnchorBag>,
    pub matches: MatchMatrix,
}

pub fn prepare_scenes(
    scenes: &[Scene],
    anchors: &[BBox],
    hp: &HyperParams,
) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|scene| {
            let boxes: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
            let bags = if boxes.is_empty() {
                Vec::new()
            } else {
                build_anchor_bags(&boxes, anchors, hp.bag_size)?
            };
            let matches = build_iou_assignment(&boxes, anchors, hp.iou_threshold)?;
            Ok(PreparedScene {
                scene_id: scene.id,
                features: extract_features(scene, anchors),
                gts: scene.objects.clone(),
                boxes,
                bags,
                matches,
            })
        })
        .collect()
}

/// Loss and prediction-space gradients for one scene under the configured
/// objective.
pub fn scene_loss(
    prepared: &PreparedScene,
    preds: &Predictions,
    anchors: &[BBox],
    mode: LossMode,
    hp: &HyperParams,
) -> Result<LossBreakdown> {
    match mode {
        LossMode::BaselineIou => baseline_loss(preds, &prepared.gts, anchors, &prepared.matches, hp.beta),
        LossMode::FreeAnchor => {
            let decoded: Vec<BBox> = anchors
                .iter()
                .zip(&preds.deltas)
                .map(|(a, d)| decode_deltas(a, d))
                .collect::<Result<Vec<BBox>>>()?;
            let mp = compute_match_probabilities(
                &prepared.bags,
                &decoded,
                &prepared.boxes,
                hp.match_threshold,
                anchors.len(),
            );
            free_anchor_loss(preds, &prepared.gts, anchors, &prepared.bags, &mp, hp)
        }
    }
}

fn learning_rate_at(config: &TrainConfig, iteration: usize) -> f64 {
    let drops = config
        .lr_milestones
        .iter()
        .filter(|&&m| iteration >= m)
        .count();
    config.hp.learning_rate / 10f64.powi(drops as i32)
}

fn batch_indices(config: &TrainConfig, iteration: usize, num_scenes: usize) -> Vec<usize> {
    // Per-iteration RNG stream so that resuming from a checkpoint replays
    // the exact same batch sequence.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(iteration as u64 + 1);
    (0..config.batch_size)
        .map(|_| rng.gen_range(0..num_scenes))
        .collect()
}

/// Train from scratch per the standard loop: initialize, then iterate
/// forward / bag construction / loss / backward / SGD.
pub fn train(scenes: &[Scene], config: &TrainConfig) -> Result<TrainResult> {
    let params = init_params(
        FEATURE_DIM,
        num_classes_of(scenes)?,
        config.hidden_dim,
        DEFAULT_PRIOR,
        config.seed,
    )?;
    resume(params, 0, scenes, config)
}

fn num_classes_of(scenes: &[Scene]) -> Result<usize> {
    let k = scenes
        .iter()
        .flat_map(|s| s.objects.iter().map(|o| o.class))
        .max()
        .map_or(1, |m| m + 1);
    Ok(k)
}

/// Continue training from existing parameters at `start_iteration`.
/// Deterministic: resuming reproduces the run that never stopped.
pub fn resume(
    mut params: ModelParams,
    start_iteration: usize,
    scenes: &[Scene],
    config: &TrainConfig,
) -> Result<TrainResult> {
    if scenes.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let anchors = generate_anchors(&config.layout)?;
    let prepared = prepare_scenes(scenes, &anchors, &config.hp)?;
    let mut log = Vec::new();
    let mut snapshots = Vec::new();

    for iteration in start_iteration..config.iterations {
        let lr = learning_rate_at(config, iteration);
        let mut grads = ParamGrads::zeros(&params);
        let mut total = 0.0;
        let mut recall = 0.0;
        let mut background = 0.0;
        let mut norm_cls = 0.0;
        let mut norm_loc = 0.0;
        let indices = batch_indices(config, iteration, scenes.len());
        for &idx in &indices {
            let scene = &prepared[idx];
            let preds = forward(&params, &scene.features)?;
            let breakdown = match scene_loss(scene, &preds, &anchors, config.mode, &config.hp) {
                Ok(b) => b,
                Err(Error::NonFinite { .. }) => {
                    return Ok(TrainResult {
                        params,
                        log,
                        snapshots,
                        diverged_at: Some(iteration),
                    });
                }
                Err(e) => return Err(e),
            };
            total += breakdown.total;
            recall += breakdown.recall_term;
            background += breakdown.background_term;
            norm_cls += breakdown
                .grad_logits
                .iter()
                .flatten()
                .map(|g| g * g)
                .sum::<f64>();
            norm_loc += breakdown
                .grad_deltas
                .iter()
                .flatten()
                .map(|g| g * g)
                .sum::<f64>();
            grads.add(&backward(
                &params,
                &scene.features,
                &breakdown.grad_logits,
                &breakdown.grad_deltas,
            ));
        }
        let scale = 1.0 / indices.len() as f64;
        grads.scale(scale);
        total *= scale;
        recall *= scale;
        background *= scale;

        if !total.is_finite() || !grads.is_finite() {
            return Ok(TrainResult {
                params,
                log,
                snapshots,
                diverged_at: Some(iteration),
            });
        }
        sgd_step(&mut params, &grads, lr)?;

        log.push(LogRow {
            iteration,
            learning_rate: lr,
            total,
            recall_term: recall,
            background_term: background,
            grad_norm_cls: norm_cls.sqrt(),
            grad_norm_loc: norm_loc.sqrt(),
        });
        if let Some(every) = config.snapshot_every {
            if (iteration + 1) % every == 0 {
                snapshots.push(Checkpoint::new(iteration + 1, params.clone()));
            }
        }
    }
    Ok(TrainResult {
        params,
        log,
        snapshots,
        diverged_at: None,
    })
}

/// Run inference: raw per-(anchor, class) detections above the score floor,
/// and the post-NMS, capped detection set.
pub fn detect(
    params: &ModelParams,
    scenes: &[Scene],
    layout: &AnchorLayout,
    nms_threshold: f64,
) -> Result<(Vec<Detection>, Vec<Detection>)> {
    let anchors = generate_anchors(layout)?;
    let mut raw = Vec::new();
    for scene in scenes {
        let features = extract_features(scene, &anchors);
        let preds = forward(params, &features)?;
        for (j, anchor) in anchors.iter().enumerate() {
            let decoded = decode_deltas(anchor, &preds.deltas[j])?;
            let clipped = BBox::new(
                decoded.x1.max(0.0),
                decoded.y1.max(0.0),
                decoded.x2.min(scene.width as f64).max(decoded.x1.max(0.0)),
                decoded.y2.min(scene.height as f64).max(decoded.y1.max(0.0)),
            );
            for c in 0..preds.num_classes() {
                let score = preds.prob(j, c);
                if score >= crate::eval::SCORE_FLOOR {
                    raw.push(Detection {
                        scene_id: scene.id,
                        bbox: clipped,
                        class: c,
                        score,
                    });
                }
            }
        }
    }
    let kept = cap_detections(&apply_nms(&raw, nms_threshold));
    Ok((raw, kept))
}

/// Detect and score a parameter set against a dataset.
pub fn evaluate(
    params: &ModelParams,
    scenes: &[Scene],
    layout: &AnchorLayout,
    nms_threshold: f64,
) -> Result<EvalReport> {
    let (raw, kept) = detect(params, scenes, layout, nms_threshold)?;
    Ok(breakdown_report(&kept, &raw, scenes, nms_threshold))
}

/// One row of the matching trace: for a checkpoint and one bag anchor, the
/// joint confidence P^cls * P^loc and the match probability P{a_j -> b_i}.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub anchor_index: usize,
    pub anchor_cx: f64,
    pub anchor_cy: f64,
    pub object_index: usize,
    pub confidence: f64,
    pub match_probability: f64,
}

pub const TRACE_CSV_HEADER: &str =
    "iteration,anchor_index,anchor_cx,anchor_cy,object_index,confidence,match_probability";

impl TraceRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.anchor_index,
            self.anchor_cx,
            self.anchor_cy,
            self.object_index,
            self.confidence,
            self.match_probability
        )
    }
}

/// Matching trace for one scene across a sequence of checkpoints.
pub fn trace_matching(
    checkpoints: &[Checkpoint],
    scene: &Scene,
    layout: &AnchorLayout,
    hp: &HyperParams,
) -> Result<Vec<TraceRow>> {
    if checkpoints.is_empty() {
        return Err(Error::Config("trace requires at least one checkpoint".into()));
    }
    let anchors = generate_anchors(layout)?;
    let boxes: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
    let bags = if boxes.is_empty() {
        Vec::new()
    } else {
        build_anchor_bags(&boxes, &anchors, hp.bag_size)?
    };
    let features = extract_features(scene, &anchors);
    let mut rows = Vec::new();
    for ckpt in checkpoints {
        let preds = forward(&ckpt.params, &features)?;
        let decoded: Vec<BBox> = anchors
            .iter()
            .zip(&preds.deltas)
            .map(|(a, d)| decode_deltas(a, d))
            .collect::<Result<Vec<BBox>>>()?;
        let mp = compute_match_probabilities(&bags, &decoded, &boxes, hp.match_threshold, anchors.len());
        for (bag, probs) in bags.iter().zip(&mp.per_object) {
            let gt = &scene.objects[bag.object];
            for (r, &j) in bag.anchors.iter().enumerate() {
                let target = crate::geometry::encode_deltas(&anchors[j], &gt.bbox)?;
                let log_conf = log_cls_confidence(&preds, j, gt.class)
                    - hp.beta * crate::geometry::smooth_l1(&preds.deltas[j], &target);
                let (cx, cy) = anchors[j].center();
                rows.push(TraceRow {
                    iteration: ckpt.iteration,
                    anchor_index: j,
                    anchor_cx: cx,
                    anchor_cy: cy,
                    object_index: bag.object,
                    confidence: log_conf.exp(),
                    match_probability: probs[r],
                });
            }
        }
    }
    Ok(rows)
}

/// Overfit a single scene and return the per-iteration loss series. Used as
/// a convergence sanity check.
pub fn overfit_single_scene_demo(iterations: usize, seed: u64) -> Result<Vec<f64>> {
    let spec = crate::synthdata::DatasetSpec {
        num_scenes: 1,
        min_objects: 2,
        max_objects: 2,
        seed,
        ..crate::synthdata::DatasetSpec::default()
    };
    let scenes = crate::synthdata::generate_dataset(&spec)?;
    let mut config = TrainConfig::desk_default(spec.width, spec.height);
    config.iterations = iterations;
    config.batch_size = 1;
    config.lr_milestones = vec![];
    config.seed = seed;
    let result = train(&scenes, &config)?;
    Ok(result.log.iter().map(|r| r.total).collect())
}
