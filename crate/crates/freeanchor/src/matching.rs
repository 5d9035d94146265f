//! Anchor-bag construction, the hand-crafted IoU assignment baseline, and the
//! NMS-compatible matching probabilities.

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// The top-n anchors for one object, ranked by IoU with the object box.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBag {
    /// Index of the object this bag belongs to.
    pub object: usize,
    /// Anchor indices, sorted by descending IoU; ties broken by lower index.
    pub anchors: Vec<usize>,
    /// IoU of each bag anchor with the object, same order as `anchors`.
    pub ious: Vec<f64>,
}

/// One bag per object. Bags may share anchors. Length of each bag is
/// `min(n, |A|)`.
pub fn build_anchor_bags(objects: &[BBox], anchors: &[BBox], n: usize) -> Result<Vec<AnchorBag>> {
    if n == 0 {
        return Err(Error::Config("anchor bag size n must be positive".into()));
    }
    if anchors.is_empty() {
        return Err(Error::Config("anchor set is empty".into()));
    }
    let bag_len = n.min(anchors.len());
    Ok(objects
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut ranked: Vec<(usize, f64)> = anchors
                .iter()
                .enumerate()
                .map(|(j, a)| (j, iou(b, a)))
                .collect();
            ranked.sort_by(|x, y| {
                y.1.partial_cmp(&x.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(x.0.cmp(&y.0))
            });
            ranked.truncate(bag_len);
            AnchorBag {
                object: i,
                anchors: ranked.iter().map(|&(j, _)| j).collect(),
                ious: ranked.iter().map(|&(_, v)| v).collect(),
            }
        })
        .collect())
}

/// Hand-crafted assignment matrix C_ij. Stored per anchor: `assigned[j]` is
/// the matched object index, if any. Column sums are 0 or 1 by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    pub num_objects: usize,
    pub assigned: Vec<Option<usize>>,
}

impl MatchMatrix {
    pub fn value(&self, object: usize, anchor: usize) -> u8 {
        u8::from(self.assigned[anchor] == Some(object))
    }

    pub fn column_sum(&self, anchor: usize) -> u8 {
        u8::from(self.assigned[anchor].is_some())
    }
}

/// Assign each anchor to the object of largest IoU, provided that IoU exceeds
/// the threshold. Ties go to the lower object index.
pub fn build_iou_assignment(
    objects: &[BBox],
    anchors: &[BBox],
    iou_threshold: f64,
) -> Result<MatchMatrix> {
    if !(0.0..1.0).contains(&iou_threshold) || iou_threshold <= 0.0 {
        return Err(Error::Config(format!(
            "IoU assignment threshold must be in (0, 1), got {iou_threshold}"
        )));
    }
    let assigned = anchors
        .iter()
        .map(|a| {
            let mut best: Option<(usize, f64)> = None;
            for (i, b) in objects.iter().enumerate() {
                let v = iou(b, a);
                if v > iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((i, v));
                }
            }
            best.map(|(i, _)| i)
        })
        .collect();
    Ok(MatchMatrix {
        num_objects: objects.len(),
        assigned,
    })
}

/// Piecewise-linear ramp: 0 below `t1`, 1 above `t2`, linear between.
pub fn saturated_linear(x: f64, t1: f64, t2: f64) -> Result<f64> {
    if t1 >= t2 {
        return Err(Error::Config(format!(
            "saturated_linear requires t1 < t2, got t1={t1}, t2={t2}"
        )));
    }
    Ok(if x <= t1 {
        0.0
    } else if x >= t2 {
        1.0
    } else {
        (x - t1) / (t2 - t1)
    })
}

/// P{a_j -> b_i} for the anchors of one bag, from their *predicted* (decoded)
/// boxes: saturated_linear(IoU_loc, t, max IoU_loc over the bag).
///
/// Degenerate case: when the bag maximum does not exceed `t`, the ramp has
/// empty support and all probabilities are 0.
pub fn match_probability(pred_boxes: &[BBox], object: &BBox, t: f64) -> Vec<f64> {
    let ious: Vec<f64> = pred_boxes.iter().map(|p| iou(p, object)).collect();
    let max = ious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= t {
        return vec![0.0; ious.len()];
    }
    ious.iter()
        .map(|&v| saturated_linear(v, t, max).expect("t < max checked above"))
        .collect()
}

/// Matching probabilities for one image: per-bag P{a_j -> b_i} plus the
/// per-anchor background probability P{a_j in A_-}.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProbabilities {
    /// `per_object[i][r]` is P{a_j -> b_i} for the r-th anchor of bag i.
    pub per_object: Vec<Vec<f64>>,
    /// P{a_j in A_-} for every anchor; exactly 1 for anchors in no bag.
    pub background: Vec<f64>,
}

/// P{a_j in A_-} = 1 - max_i P{a_j -> b_i}, with the max over the bags that
/// contain anchor j.
pub fn background_probabilities(
    bags: &[AnchorBag],
    per_object: &[Vec<f64>],
    num_anchors: usize,
) -> Vec<f64> {
    let mut best_match = vec![0.0f64; num_anchors];
    for (bag, probs) in bags.iter().zip(per_object) {
        for (&j, &p) in bag.anchors.iter().zip(probs) {
            if p > best_match[j] {
                best_match[j] = p;
            }
        }
    }
    best_match.iter().map(|&m| 1.0 - m).collect()
}

/// Full matching-probability computation from decoded per-anchor boxes.
pub fn compute_match_probabilities(
    bags: &[AnchorBag],
    decoded_boxes: &[BBox],
    objects: &[BBox],
    t: f64,
    num_anchors: usize,
) -> MatchProbabilities {
    let per_object: Vec<Vec<f64>> = bags
        .iter()
        .map(|bag| {
            let preds: Vec<BBox> = bag.anchors.iter().map(|&j| decoded_boxes[j]).collect();
            match_probability(&preds, &objects[bag.object], t)
        })
        .collect();
    let background = background_probabilities(bags, &per_object, num_anchors);
    MatchProbabilities {
        per_object,
        background,
    }
}
