//! Detection evaluation: COCO-style average precision (101-point
//! interpolation, per class, averaged over IoU 0.50:0.05:0.95), NMS recall
//! NR_tau / NR, and slender/crowdedness breakdowns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, nms, BBox};
use crate::synthdata::Scene;

/// COCO-convention caps applied before scoring a report.
pub const MAX_DETECTIONS_PER_SCENE: usize = 100;
pub const SCORE_FLOOR: f64 = 0.01;

/// IoU thresholds for the COCO-style AP mean.
pub const AP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// IoU thresholds tau for the NMS-recall mean.
pub const NR_THRESHOLDS: [f64; 9] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90];

/// Aspect ratio max(w/h, h/w) at and above which an object counts as slender.
pub const SLENDER_ASPECT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: u64,
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub scene_id: u64,
    pub bbox: BBox,
    pub class: usize,
}

pub fn ground_truths(scenes: &[Scene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .flat_map(|s| {
            s.objects.iter().map(|o| GroundTruth {
                scene_id: s.id,
                bbox: o.bbox,
                class: o.class,
            })
        })
        .collect()
}

/// Apply the evaluation caps: drop detections below the score floor and keep
/// at most `MAX_DETECTIONS_PER_SCENE` per scene by descending score.
pub fn cap_detections(detections: &[Detection]) -> Vec<Detection> {
    let mut by_scene: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        if d.score >= SCORE_FLOOR {
            by_scene.entry(d.scene_id).or_default().push(*d);
        }
    }
    let mut out = Vec::new();
    for dets in by_scene.values_mut() {
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        dets.truncate(MAX_DETECTIONS_PER_SCENE);
        out.extend_from_slice(dets);
    }
    out
}

/// Per-class AP with COCO-style ignore semantics. Ground truths flagged
/// `ignore` can absorb detections without counting as positives. Returns
/// `None` when the class has no non-ignored ground truth.
fn per_class_ap(
    detections: &[&Detection],
    gts: &[(GroundTruth, bool)],
    iou_threshold: f64,
) -> Option<f64> {
    let npos = gts.iter().filter(|(_, ig)| !ig).count();
    if npos == 0 {
        return None;
    }
    // Sort detections by descending score, ties by input order.
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut gt_matched = vec![false; gts.len()];
    // tp/fp flags in score order; ignored detections are dropped entirely.
    let mut tps = Vec::new();
    for &di in &order {
        let det = detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gt, ignore)) in gts.iter().enumerate() {
            if *ignore || gt_matched[gi] || gt.scene_id != det.scene_id {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            gt_matched[gi] = true;
            tps.push(true);
            continue;
        }
        // Unmatched: absorbed by an ignored ground truth?
        let absorbed = gts.iter().any(|(gt, ignore)| {
            *ignore && gt.scene_id == det.scene_id && iou(&det.bbox, &gt.bbox) >= iou_threshold
        });
        if !absorbed {
            tps.push(false);
        }
    }

    // Precision-recall curve and 101-point interpolation.
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(tps.len()); // (recall, precision)
    for &is_tp in &tps {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    for r in 0..=100 {
        let rec = r as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(cr, _)| *cr >= rec - 1e-12)
            .map(|(_, cp)| *cp)
            .fold(0.0f64, f64::max);
        ap += p;
    }
    Some(ap / 101.0)
}

fn mean_ap_over_classes(
    detections: &[Detection],
    gts: &[(GroundTruth, bool)],
    iou_threshold: f64,
) -> Option<f64> {
    let classes: std::collections::BTreeSet<usize> = gts
        .iter()
        .filter(|(_, ig)| !ig)
        .map(|(g, _)| g.class)
        .collect();
    let mut aps = Vec::new();
    for &c in &classes {
        let class_dets: Vec<&Detection> = detections.iter().filter(|d| d.class == c).collect();
        let class_gts: Vec<(GroundTruth, bool)> =
            gts.iter().filter(|(g, _)| g.class == c).cloned().collect();
        if let Some(ap) = per_class_ap(&class_dets, &class_gts, iou_threshold) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

/// AP at one IoU threshold (mean over classes with ground truth).
pub fn average_precision(detections: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> f64 {
    let flagged: Vec<(GroundTruth, bool)> = gts.iter().map(|&g| (g, false)).collect();
    mean_ap_over_classes(detections, &flagged, iou_threshold).unwrap_or(0.0)
}

/// COCO-style AP: mean of [`average_precision`] over IoU 0.50:0.05:0.95.
pub fn coco_ap(detections: &[Detection], gts: &[GroundTruth]) -> f64 {
    AP_THRESHOLDS
        .iter()
        .map(|&t| average_precision(detections, gts, t))
        .sum::<f64>()
        / AP_THRESHOLDS.len() as f64
}

fn coco_ap_with_ignore(detections: &[Detection], gts: &[(GroundTruth, bool)]) -> Option<f64> {
    let aps: Vec<f64> = AP_THRESHOLDS
        .iter()
        .filter_map(|&t| mean_ap_over_classes(detections, gts, t))
        .collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

/// Class-agnostic recall at IoU `tau`: greedy one-to-one matching of
/// detections (descending score) to ground truths of the same scene.
fn recall_at(detections: &[Detection], gts: &[GroundTruth], tau: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut matched = vec![false; gts.len()];
    let mut count = 0usize;
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] || gt.scene_id != det.scene_id {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= tau && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            count += 1;
        }
    }
    count as f64 / gts.len() as f64
}

/// Apply per-scene, per-class NMS to a raw detection set.
pub fn apply_nms(detections: &[Detection], nms_threshold: f64) -> Vec<Detection> {
    let mut groups: BTreeMap<(u64, usize), Vec<Detection>> = BTreeMap::new();
    for d in detections {
        groups.entry((d.scene_id, d.class)).or_default().push(*d);
    }
    let mut out = Vec::new();
    for dets in groups.values() {
        let boxes: Vec<(BBox, f64)> = dets.iter().map(|d| (d.bbox, d.score)).collect();
        for idx in nms(&boxes, nms_threshold) {
            out.push(dets[idx]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmsRecallReport {
    /// NR_tau keyed by "0.50".."0.90"; `None` marks an undefined ratio
    /// (before-NMS recall was zero at that tau).
    pub per_tau: BTreeMap<String, Option<f64>>,
    /// Mean over the defined NR_tau values.
    pub nr: Option<f64>,
    pub undefined_taus: Vec<String>,
}

/// NMS recall: the ratio of recall after NMS to recall before NMS, per tau,
/// plus the mean NR over tau in {0.50, ..., 0.90}.
pub fn nms_recall(
    raw_detections: &[Detection],
    gts: &[GroundTruth],
    taus: &[f64],
    nms_threshold: f64,
) -> NmsRecallReport {
    let kept = apply_nms(raw_detections, nms_threshold);
    let mut per_tau = BTreeMap::new();
    let mut undefined = Vec::new();
    let mut defined = Vec::new();
    for &tau in taus {
        let key = format!("{tau:.2}");
        let before = recall_at(raw_detections, gts, tau);
        let value = if before > 0.0 {
            let after = recall_at(&kept, gts, tau);
            let nr = after / before;
            defined.push(nr);
            Some(nr)
        } else {
            undefined.push(key.clone());
            None
        };
        per_tau.insert(key, value);
    }
    let nr = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    NmsRecallReport {
        per_tau,
        nr,
        undefined_taus: undefined,
    }
}

/// Full evaluation report. All metrics live in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// NMS recall in this report is class-agnostic; AP is per-class.
    pub notes: String,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class_ap: BTreeMap<String, f64>,
    pub nms_recall: NmsRecallReport,
    /// AP over the slender ground-truth subset; absent if no slender objects.
    pub slender_ap: Option<f64>,
    /// AP over the square (non-slender) subset; absent if empty.
    pub square_ap: Option<f64>,
    /// AP per crowdedness bucket; only non-empty buckets appear.
    pub crowdedness_ap: BTreeMap<String, f64>,
}

pub const CROWD_BUCKETS: [(usize, usize, &str); 4] =
    [(1, 1, "1"), (2, 3, "2-3"), (4, 6, "4-6"), (7, usize::MAX, "7+")];

/// Build the full report from capped detections plus the raw (pre-NMS,
/// pre-cap) detections needed by the NMS-recall metric.
pub fn breakdown_report(
    detections: &[Detection],
    raw_detections: &[Detection],
    scenes: &[Scene],
    nms_threshold: f64,
) -> EvalReport {
    let gts = ground_truths(scenes);
    let flagged: Vec<(GroundTruth, bool)> = gts.iter().map(|&g| (g, false)).collect();

    let mut per_class_ap = BTreeMap::new();
    let classes: std::collections::BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    for &c in &classes {
        let class_gts: Vec<(GroundTruth, bool)> =
            flagged.iter().filter(|(g, _)| g.class == c).cloned().collect();
        let class_dets: Vec<Detection> =
            detections.iter().filter(|d| d.class == c).cloned().collect();
        if let Some(ap) = coco_ap_with_ignore(&class_dets, &class_gts) {
            per_class_ap.insert(c.to_string(), ap);
        }
    }

    // Shape subsets: the other subset's ground truths become ignores so that
    // detections of those objects are absorbed rather than counted as FPs.
    let slender_flags: Vec<(GroundTruth, bool)> = gts
        .iter()
        .map(|&g| (g, g.bbox.elongation() < SLENDER_ASPECT))
        .collect();
    let square_flags: Vec<(GroundTruth, bool)> = gts
        .iter()
        .map(|&g| (g, g.bbox.elongation() >= SLENDER_ASPECT))
        .collect();
    let slender_ap = coco_ap_with_ignore(detections, &slender_flags);
    let square_ap = coco_ap_with_ignore(detections, &square_flags);

    let mut crowdedness_ap = BTreeMap::new();
    for (lo, hi, label) in CROWD_BUCKETS {
        let bucket: Vec<u64> = scenes
            .iter()
            .filter(|s| s.objects.len() >= lo && s.objects.len() <= hi)
            .map(|s| s.id)
            .collect();
        if bucket.is_empty() {
            continue;
        }
        let b_dets: Vec<Detection> = detections
            .iter()
            .filter(|d| bucket.contains(&d.scene_id))
            .cloned()
            .collect();
        let b_gts: Vec<GroundTruth> = gts
            .iter()
            .filter(|g| bucket.contains(&g.scene_id))
            .cloned()
            .collect();
        if b_gts.is_empty() {
            continue;
        }
        crowdedness_ap.insert(label.to_string(), coco_ap(&b_dets, &b_gts));
    }

    EvalReport {
        notes: "NMS recall is class-agnostic; AP is per-class with 101-point interpolation".into(),
        ap: coco_ap(detections, &gts),
        ap50: average_precision(detections, &gts, 0.50),
        ap75: average_precision(detections, &gts, 0.75),
        per_class_ap,
        nms_recall: nms_recall(raw_detections, &gts, &NR_THRESHOLDS, nms_threshold),
        slender_ap,
        square_ap,
        crowdedness_ap,
    }
}

/// CSV of the 101-point precision-recall curves per class at one threshold.
pub fn pr_curves_csv(detections: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> String {
    let mut out = String::from("class,recall,precision\n");
    let classes: std::collections::BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    for &c in &classes {
        let class_dets: Vec<&Detection> = detections.iter().filter(|d| d.class == c).collect();
        let class_gts: Vec<(GroundTruth, bool)> = gts
            .iter()
            .filter(|g| g.class == c)
            .map(|&g| (g, false))
            .collect();
        let npos = class_gts.len();
        if npos == 0 {
            continue;
        }
        // Re-run the matching to expose the interpolated curve.
        for r in 0..=100 {
            let rec = r as f64 / 100.0;
            let p = interpolated_precision(&class_dets, &class_gts, iou_threshold, rec);
            out.push_str(&format!("{c},{rec},{p}\n"));
        }
    }
    out
}

fn interpolated_precision(
    detections: &[&Detection],
    gts: &[(GroundTruth, bool)],
    iou_threshold: f64,
    recall: f64,
) -> f64 {
    // Direct (quadratic) evaluation; only used for CSV export.
    let npos = gts.len();
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut best_p = 0.0f64;
    for &di in &order {
        let det = detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gt, _)) in gts.iter().enumerate() {
            if matched[gi] || gt.scene_id != det.scene_id {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        let r = tp as f64 / npos as f64;
        if r >= recall - 1e-12 {
            best_p = best_p.max(tp as f64 / (tp + fp) as f64);
        }
    }
    best_p
}
