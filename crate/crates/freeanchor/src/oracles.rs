//! Independent reference implementations used only for cross-checking.
//!
//! These deliberately avoid sharing code with the production paths: NMS is
//! re-derived with an O(n^2) removal-marking scan, top-n selection with a full
//! sort of all IoUs, and the confidences with textbook cross-entropy sums.

use crate::geometry::{iou, BBox};

/// O(n^2) NMS: repeatedly take the best-scored unremoved box and mark every
/// overlapping box above the threshold as removed.
pub fn nms_brute_force(detections: &[(BBox, f64)], threshold: f64) -> Vec<usize> {
    let n = detections.len();
    let mut removed = vec![false; n];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if removed[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) => {
                    if detections[i].1 > detections[b].1 {
                        best = Some(i);
                    }
                }
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        removed[b] = true;
        for i in 0..n {
            if !removed[i] && iou(&detections[b].0, &detections[i].0) > threshold {
                removed[i] = true;
            }
        }
    }
    keep
}

/// Full-sort top-n oracle for anchor-bag construction.
pub fn top_n_anchors(object: &BBox, anchors: &[BBox], n: usize) -> Vec<usize> {
    let mut all: Vec<(usize, f64)> = anchors
        .iter()
        .enumerate()
        .map(|(j, a)| (j, iou(object, a)))
        .collect();
    all.sort_by(|x, y| {
        y.1.partial_cmp(&x.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.0.cmp(&y.0))
    });
    all.truncate(n.min(anchors.len()));
    all.into_iter().map(|(j, _)| j).collect()
}

/// Textbook binary cross entropy of a multi-label prediction against a
/// one-hot target, computed directly from probabilities.
pub fn bce_one_hot(probs: &[f64], label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(c, &p)| if c == label { -p.ln() } else { -(1.0 - p).ln() })
        .sum()
}

/// Binary cross entropy against the all-zero (background) target.
pub fn bce_background(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| -(1.0 - p).ln()).sum()
}

/// Central finite difference of a scalar function.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
