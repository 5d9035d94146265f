//! Likelihoods and losses: the hand-crafted assignment baseline, the
//! detection-customized likelihood (recall x precision), Mean-max anchor
//! selection, the focal background term, and analytic gradients.
//!
//! Gradients flow through class logits and box deltas only. The matching
//! probabilities P{a_j -> b_i} and P{a_j in A_-} are treated as constant
//! coefficients (stop-gradient): they are computed from decoded boxes once
//! and passed in as data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    encode_deltas, smooth_l1, smooth_l1_grad, smooth_l1_scalar_grad, BBox, GtBox,
};
use crate::matching::{AnchorBag, MatchMatrix, MatchProbabilities};

/// Probability floor/ceiling applied before logs and Mean-max.
pub const EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-anchor network outputs: pre-sigmoid class logits and raw box deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// `logits[j][c]` for anchor j, class c. Probabilities are sigmoids of
    /// these, hence strictly inside (0, 1) for finite logits.
    pub logits: Vec<Vec<f64>>,
    /// `deltas[j]` are the four regression outputs for anchor j.
    pub deltas: Vec<[f64; 4]>,
}

impl Predictions {
    pub fn num_anchors(&self) -> usize {
        self.logits.len()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.first().map_or(0, |l| l.len())
    }

    /// Post-sigmoid probability for anchor `j`, class `c`.
    pub fn prob(&self, j: usize, c: usize) -> f64 {
        sigmoid(self.logits[j][c])
    }
}

/// Hyper-parameters of the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Anchor bag size n.
    pub bag_size: usize,
    /// Background IoU threshold t in the saturated-linear ramp.
    pub match_threshold: f64,
    /// Focal balance alpha; enters through w1 and w2.
    pub alpha: f64,
    /// Focal exponent gamma.
    pub gamma: f64,
    /// Localization regularizer beta.
    pub beta: f64,
    /// IoU threshold of the hand-crafted assignment baseline.
    pub iou_threshold: f64,
    /// SGD learning rate lambda.
    pub learning_rate: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            bag_size: 50,
            match_threshold: 0.6,
            alpha: 0.5,
            gamma: 2.0,
            beta: 0.75,
            iou_threshold: 0.5,
            learning_rate: 0.01,
        }
    }
}

impl HyperParams {
    /// Per-image weights w1 = alpha/|B| and w2 = (1-alpha)/(n|B|).
    /// For an empty image the recall weight is dropped and the background
    /// weight falls back to (1-alpha)/n.
    pub fn weights(&self, num_objects: usize) -> (f64, f64) {
        if num_objects == 0 {
            (0.0, (1.0 - self.alpha) / self.bag_size as f64)
        } else {
            let nb = num_objects as f64;
            (
                self.alpha / nb,
                (1.0 - self.alpha) / (self.bag_size as f64 * nb),
            )
        }
    }
}

/// Scalar loss with per-term decomposition and gradients w.r.t. predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Recall (positive) term; -w1 sum_i log MeanMax(X_i) for the free-anchor
    /// loss, the matched cls+loc terms for the baseline.
    pub recall_term: f64,
    /// Background / precision term.
    pub background_term: f64,
    /// Mean-max inputs X_i per object (empty for the baseline loss).
    pub meanmax_inputs: Vec<Vec<f64>>,
    pub grad_logits: Vec<Vec<f64>>,
    pub grad_deltas: Vec<[f64; 4]>,
}

impl LossBreakdown {
    pub fn gradients(&self) -> (&Vec<Vec<f64>>, &Vec<[f64; 4]>) {
        (&self.grad_logits, &self.grad_deltas)
    }

    fn zeros(num_anchors: usize, num_classes: usize) -> Self {
        LossBreakdown {
            total: 0.0,
            recall_term: 0.0,
            background_term: 0.0,
            meanmax_inputs: Vec::new(),
            grad_logits: vec![vec![0.0; num_classes]; num_anchors],
            grad_deltas: vec![[0.0; 4]; num_anchors],
        }
    }
}

/// log of the classification confidence e^{-BCE(a_j^cls, one_hot(label))},
/// computed from logits.
pub fn log_cls_confidence(preds: &Predictions, anchor: usize, label: usize) -> f64 {
    preds.logits[anchor]
        .iter()
        .enumerate()
        .map(|(c, &z)| {
            if c == label {
                -softplus(-z) // log sigmoid(z)
            } else {
                -softplus(z) // log (1 - sigmoid(z))
            }
        })
        .sum()
}

/// Classification confidence P_ij^cls = e^{-BCE}.
pub fn cls_confidence(preds: &Predictions, anchor: usize, label: usize) -> f64 {
    log_cls_confidence(preds, anchor, label).exp()
}

/// Localization confidence P_ij^loc = e^{-beta SmoothL1}.
pub fn loc_confidence(pred_deltas: &[f64; 4], anchor: &BBox, target: &BBox, beta: f64) -> Result<f64> {
    let t = encode_deltas(anchor, target)?;
    Ok((-beta * smooth_l1(pred_deltas, &t)).exp())
}

/// log of the background confidence P_j^bg = prod_c (1 - p_c) = e^{-L_j^bg}.
pub fn log_bg_confidence(preds: &Predictions, anchor: usize) -> f64 {
    preds.logits[anchor].iter().map(|&z| -softplus(z)).sum()
}

/// Joint log-confidence log(P_ij^cls * P_ij^loc) for one anchor/object pair.
fn log_joint_confidence(
    preds: &Predictions,
    anchor_idx: usize,
    anchor: &BBox,
    gt: &GtBox,
    beta: f64,
) -> Result<f64> {
    let target = encode_deltas(anchor, &gt.bbox)?;
    let loc = -beta * smooth_l1(&preds.deltas[anchor_idx], &target);
    Ok(log_cls_confidence(preds, anchor_idx, gt.class) + loc)
}

/// Hand-crafted assignment loss (BCE + beta SmoothL1 on matched anchors,
/// background BCE on the rest), with gradients.
pub fn baseline_loss(
    preds: &Predictions,
    gts: &[GtBox],
    anchors: &[BBox],
    matches: &MatchMatrix,
    beta: f64,
) -> Result<LossBreakdown> {
    let k = preds.num_classes();
    let mut out = LossBreakdown::zeros(preds.num_anchors(), k);
    for j in 0..preds.num_anchors() {
        match matches.assigned[j] {
            Some(i) => {
                let gt = &gts[i];
                let l_cls = -log_cls_confidence(preds, j, gt.class);
                let target = encode_deltas(&anchors[j], &gt.bbox)?;
                let l_loc = smooth_l1(&preds.deltas[j], &target);
                out.recall_term += l_cls + beta * l_loc;
                for c in 0..k {
                    let y = f64::from(c == gt.class);
                    out.grad_logits[j][c] += preds.prob(j, c) - y;
                }
                let g = smooth_l1_grad(&preds.deltas[j], &target);
                for d in 0..4 {
                    out.grad_deltas[j][d] += beta * g[d];
                }
            }
            None => {
                out.background_term += -log_bg_confidence(preds, j);
                for c in 0..k {
                    out.grad_logits[j][c] += preds.prob(j, c);
                }
            }
        }
    }
    out.total = out.recall_term + out.background_term;
    if !out.total.is_finite() {
        return Err(Error::NonFinite {
            term: "baseline loss".into(),
        });
    }
    Ok(out)
}

/// Product-form likelihood of the baseline loss; equals e^{-baseline_loss}
/// up to floating point.
pub fn likelihood_of_loss(
    preds: &Predictions,
    gts: &[GtBox],
    anchors: &[BBox],
    matches: &MatchMatrix,
    beta: f64,
) -> Result<f64> {
    let mut p = 1.0;
    for j in 0..preds.num_anchors() {
        match matches.assigned[j] {
            Some(i) => {
                let gt = &gts[i];
                p *= cls_confidence(preds, j, gt.class);
                p *= loc_confidence(&preds.deltas[j], &anchors[j], &gt.bbox, beta)?;
            }
            None => p *= log_bg_confidence(preds, j).exp(),
        }
    }
    Ok(p)
}

/// Recall likelihood: prod_i max_{j in A_i} P_ij^cls P_ij^loc.
pub fn recall_likelihood(
    preds: &Predictions,
    gts: &[GtBox],
    anchors: &[BBox],
    bags: &[AnchorBag],
    beta: f64,
) -> Result<f64> {
    let mut p = 1.0;
    for bag in bags {
        let gt = &gts[bag.object];
        let best = bag
            .anchors
            .iter()
            .map(|&j| log_joint_confidence(preds, j, &anchors[j], gt, beta))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        p *= best.exp();
    }
    Ok(p)
}

/// Precision likelihood: prod_j (1 - P{a_j in A_-}(1 - P_j^bg)).
pub fn precision_likelihood(preds: &Predictions, match_probs: &MatchProbabilities) -> f64 {
    let mut p = 1.0;
    for (j, &bg) in match_probs.background.iter().enumerate() {
        let one_minus_pbg = -log_bg_confidence(preds, j).exp_m1();
        p *= 1.0 - bg * one_minus_pbg;
    }
    p
}

/// Detection-customized likelihood: recall x precision.
pub fn customized_likelihood(
    preds: &Predictions,
    gts: &[GtBox],
    anchors: &[BBox],
    bags: &[AnchorBag],
    match_probs: &MatchProbabilities,
    beta: f64,
) -> Result<f64> {
    Ok(recall_likelihood(preds, gts, anchors, bags, beta)? * precision_likelihood(preds, match_probs))
}

/// Max-form customized loss, -log P', accumulated in log space.
pub fn customized_loss_max(
    preds: &Predictions,
    gts: &[GtBox],
    anchors: &[BBox],
    bags: &[AnchorBag],
    match_probs: &MatchProbabilities,
    beta: f64,
) -> Result<f64> {
    let mut loss = 0.0;
    for bag in bags {
        let gt = &gts[bag.object];
        let best = bag
            .anchors
            .iter()
            .map(|&j| log_joint_confidence(preds, j, &anchors[j], gt, beta))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        loss -= best;
    }
    for (j, &bg) in match_probs.background.iter().enumerate() {
        let one_minus_pbg = -log_bg_confidence(preds, j).exp_m1();
        let q = (bg * one_minus_pbg).min(1.0 - EPS);
        loss -= (-q).ln_1p();
    }
    Ok(loss)
}

/// Mean-max selection: (sum x/(1-x)) / (sum 1/(1-x)). Inputs at or above 1
/// are clamped to 1 - EPS.
pub fn mean_max(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "mean_max of an empty set");
    // Constant input: the weighted mean of identical values is that value;
    // shortcut to keep the identity exact in floating point.
    if xs.iter().all(|&x| x == xs[0]) {
        return xs[0].min(1.0 - EPS);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &x in xs {
        let x = x.min(1.0 - EPS);
        num += x / (1.0 - x);
        den += 1.0 / (1.0 - x);
    }
    num / den
}

/// Focal background penalty FL(x) = -x^gamma log(1 - x).
pub fn focal_term(x: f64, gamma: f64) -> f64 {
    let x = x.min(1.0 - EPS);
    -x.powf(gamma) * (-x).ln_1p()
}

/// Derivative of [`focal_term`]; 0 at x = 0.
pub fn focal_term_grad(x: f64, gamma: f64) -> f64 {
    let x = x.min(1.0 - EPS);
    if x <= 0.0 {
        return 0.0;
    }
    -gamma * x.powf(gamma - 1.0) * (-x).ln_1p() + x.powf(gamma) / (1.0 - x)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// The full training objective:
///
/// L'' = -w1 sum_i log MeanMax(X_i) + w2 sum_j FL(P{a_j in A_-}(1 - P_j^bg))
///
/// with X_i = {P_ij^cls P_ij^loc : j in A_i}. Gradients are populated w.r.t.
/// class logits and box deltas; the matching probabilities are constants.
pub fn free_anchor_loss(
    preds: &Predictions,
    gts: &[GtBox],
    anchors: &[BBox],
    bags: &[AnchorBag],
    match_probs: &MatchProbabilities,
    hp: &HyperParams,
) -> Result<LossBreakdown> {
    let num_anchors = preds.num_anchors();
    let k = preds.num_classes();
    if anchors.len() != num_anchors || match_probs.background.len() != num_anchors {
        return Err(Error::DimensionMismatch(format!(
            "anchors {}, predictions {}, background probabilities {}",
            anchors.len(),
            num_anchors,
            match_probs.background.len()
        )));
    }
    if bags.len() != gts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} bags for {} objects",
            bags.len(),
            gts.len()
        )));
    }

    let (w1, w2) = hp.weights(gts.len());
    let mut out = LossBreakdown::zeros(num_anchors, k);
    let max_log = (-EPS).ln_1p(); // log(1 - EPS)

    // Recall term: -w1 sum_i log MeanMax(X_i), evaluated through log-space
    // sums so that values near 0 early in training stay accurate.
    for bag in bags {
        let gt = &gts[bag.object];
        let mut logs: Vec<f64> = Vec::with_capacity(bag.anchors.len());
        let mut targets: Vec<[f64; 4]> = Vec::with_capacity(bag.anchors.len());
        for &j in &bag.anchors {
            let target = encode_deltas(&anchors[j], &gt.bbox)?;
            let l = log_cls_confidence(preds, j, gt.class)
                - hp.beta * smooth_l1(&preds.deltas[j], &target);
            logs.push(l.min(max_log));
            targets.push(target);
        }
        // a = -log(1 - x); S1 = sum x/(1-x); S2 = sum 1/(1-x).
        let a: Vec<f64> = logs.iter().map(|&l| -(-l.exp()).ln_1p()).collect();
        let s1_terms: Vec<f64> = logs.iter().zip(&a).map(|(&l, &ai)| l + ai).collect();
        let log_s1 = log_sum_exp(&s1_terms);
        let log_s2 = log_sum_exp(&a);
        let term = log_s2 - log_s1; // -log MeanMax(X_i) >= 0
        out.recall_term += w1 * term;
        out.meanmax_inputs.push(logs.iter().map(|&l| l.exp()).collect());

        for (r, &j) in bag.anchors.iter().enumerate() {
            // d term / d log(x) = exp(l + 2a - logS2) - exp(l + 2a - logS1)
            let base = logs[r] + 2.0 * a[r];
            let dterm_dl = (base - log_s2).exp() - (base - log_s1).exp();
            let g = w1 * dterm_dl;
            let label = gt.class;
            for c in 0..k {
                let p = preds.prob(j, c);
                let dl_dz = if c == label { 1.0 - p } else { -p };
                out.grad_logits[j][c] += g * dl_dz;
            }
            for d in 0..4 {
                let dl_dd =
                    -hp.beta * smooth_l1_scalar_grad(preds.deltas[j][d] - targets[r][d]);
                out.grad_deltas[j][d] += g * dl_dd;
            }
        }
    }

    // Background term: w2 sum_j FL(m_j (1 - P_j^bg)) with m_j constant.
    for j in 0..num_anchors {
        let m = match_probs.background[j];
        let log_pbg = log_bg_confidence(preds, j);
        let pbg = log_pbg.exp();
        let one_minus_pbg = -log_pbg.exp_m1();
        let q = (m * one_minus_pbg).min(1.0 - EPS);
        out.background_term += w2 * focal_term(q, hp.gamma);
        let dfl = focal_term_grad(q, hp.gamma);
        for c in 0..k {
            let p = preds.prob(j, c);
            // dq/dz_c = m * p_c * P^bg
            out.grad_logits[j][c] += w2 * dfl * m * p * pbg;
        }
    }

    out.total = out.recall_term + out.background_term;
    if !out.recall_term.is_finite() {
        return Err(Error::NonFinite {
            term: "free-anchor recall term".into(),
        });
    }
    if !out.background_term.is_finite() {
        return Err(Error::NonFinite {
            term: "free-anchor background term".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{build_anchor_bags, build_iou_assignment, compute_match_probabilities};
    use crate::oracles;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(
        rng: &mut ChaCha8Rng,
        num_objects: usize,
        num_anchors: usize,
        k: usize,
    ) -> (Predictions, Vec<GtBox>, Vec<BBox>) {
        let gts: Vec<GtBox> = (0..num_objects)
            .map(|_| {
                let x1: f64 = rng.gen_range(0.0..40.0);
                let y1: f64 = rng.gen_range(0.0..40.0);
                GtBox {
                    bbox: BBox::new(x1, y1, x1 + rng.gen_range(4.0..24.0), y1 + rng.gen_range(4.0..24.0)),
                    class: rng.gen_range(0..k),
                }
            })
            .collect();
        let anchors: Vec<BBox> = (0..num_anchors)
            .map(|_| {
                let x1: f64 = rng.gen_range(0.0..48.0);
                let y1: f64 = rng.gen_range(0.0..48.0);
                BBox::new(x1, y1, x1 + rng.gen_range(4.0..20.0), y1 + rng.gen_range(4.0..20.0))
            })
            .collect();
        let preds = Predictions {
            logits: (0..num_anchors)
                .map(|_| (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect(),
            deltas: (0..num_anchors)
                .map(|_| {
                    [
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    ]
                })
                .collect(),
        };
        (preds, gts, anchors)
    }

    #[test]
    fn cls_confidence_perfect_prediction() {
        let preds = Predictions {
            logits: vec![vec![30.0, -30.0, -30.0]],
            deltas: vec![[0.0; 4]],
        };
        assert!((cls_confidence(&preds, 0, 0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cls_confidence_half() {
        let preds = Predictions {
            logits: vec![vec![0.0]],
            deltas: vec![[0.0; 4]],
        };
        assert!((cls_confidence(&preds, 0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cls_confidence_matches_bce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let k = 4;
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let label = rng.gen_range(0..k);
            let preds = Predictions {
                logits: vec![logits.clone()],
                deltas: vec![[0.0; 4]],
            };
            let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let expected = (-oracles::bce_one_hot(&probs, label)).exp();
            let got = cls_confidence(&preds, 0, label);
            assert!((got - expected).abs() < 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn loc_confidence_values() {
        let anchor = BBox::new(0.0, 0.0, 8.0, 8.0);
        let target = BBox::new(1.0, 1.0, 9.0, 9.0);
        let t = encode_deltas(&anchor, &target).unwrap();
        assert!((loc_confidence(&t, &anchor, &target, 0.75).unwrap() - 1.0).abs() < 1e-15);

        // SmoothL1 of exactly 1 => e^{-beta}.
        let pred = [t[0] + 1.5, t[1], t[2], t[3]]; // kernel(1.5) = 1.0
        let c = loc_confidence(&pred, &anchor, &target, 0.75).unwrap();
        assert!((c - (-0.75f64).exp()).abs() < 1e-12);

        // Monotone in the SmoothL1 value.
        let worse = [t[0] + 2.0, t[1], t[2], t[3]];
        assert!(loc_confidence(&worse, &anchor, &target, 0.75).unwrap() < c);
    }

    #[test]
    fn baseline_loss_no_objects_is_background_only() {
        let preds = Predictions {
            logits: vec![vec![0.5, -1.0], vec![-0.2, 0.3]],
            deltas: vec![[0.0; 4]; 2],
        };
        let matches = MatchMatrix {
            num_objects: 0,
            assigned: vec![None, None],
        };
        let out = baseline_loss(&preds, &[], &[], &matches, 0.75).unwrap();
        assert_eq!(out.recall_term, 0.0);
        let expected: f64 = (0..2)
            .map(|j| {
                let probs: Vec<f64> = preds.logits[j].iter().map(|&z| sigmoid(z)).collect();
                oracles::bce_background(&probs)
            })
            .sum();
        assert!((out.total - expected).abs() < 1e-12);
    }

    #[test]
    fn likelihood_identity_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let (preds, gts, anchors) = random_instance(&mut rng, 3, 25, 2);
            let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
            let matches = build_iou_assignment(&boxes, &anchors, 0.4).unwrap();
            let loss = baseline_loss(&preds, &gts, &anchors, &matches, 0.75).unwrap();
            let p = likelihood_of_loss(&preds, &gts, &anchors, &matches, 0.75).unwrap();
            let e = (-loss.total).exp();
            assert!((p - e).abs() < 1e-12 * e.max(1.0), "p={p} e={e}");
        }
    }

    #[test]
    fn recall_likelihood_trivial_cases() {
        // Empty object set: empty product.
        let preds = Predictions {
            logits: vec![vec![0.0]],
            deltas: vec![[0.0; 4]],
        };
        assert_eq!(recall_likelihood(&preds, &[], &[BBox::new(0.0, 0.0, 1.0, 1.0)], &[], 0.75).unwrap(), 1.0);

        // One object whose bag anchor predicts it perfectly.
        let anchor = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gt = GtBox { bbox: anchor, class: 0 };
        let preds = Predictions {
            logits: vec![vec![40.0]],
            deltas: vec![[0.0; 4]],
        };
        let bags = build_anchor_bags(&[anchor], &[anchor], 1).unwrap();
        let p = recall_likelihood(&preds, &[gt], &[anchor], &bags, 0.75).unwrap();
        assert!((p - 1.0).abs() < 1e-10);
    }

    #[test]
    fn recall_likelihood_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let (preds, gts, anchors) = random_instance(&mut rng, 2, 12, 3);
            let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
            let bags = build_anchor_bags(&boxes, &anchors, 3).unwrap();
            let got = recall_likelihood(&preds, &gts, &anchors, &bags, 0.75).unwrap();
            // Exhaustive per-bag max over explicit confidences.
            let mut expected = 1.0;
            for bag in &bags {
                let gt = &gts[bag.object];
                let best = bag
                    .anchors
                    .iter()
                    .map(|&j| {
                        cls_confidence(&preds, j, gt.class)
                            * loc_confidence(&preds.deltas[j], &anchors[j], &gt.bbox, 0.75).unwrap()
                    })
                    .fold(0.0f64, f64::max);
                expected *= best;
            }
            assert!((got - expected).abs() < 1e-12 * expected.max(1e-30));
        }
    }

    #[test]
    fn precision_likelihood_trivial_cases() {
        let preds = Predictions {
            logits: vec![vec![-50.0], vec![2.0]],
            deltas: vec![[0.0; 4]; 2],
        };
        // Fully matched anchors contribute factor 1.
        let mp = MatchProbabilities {
            per_object: vec![],
            background: vec![0.0, 0.0],
        };
        assert_eq!(precision_likelihood(&preds, &mp), 1.0);

        // A pure-background anchor with near-zero class probabilities also
        // contributes a factor near 1.
        let mp = MatchProbabilities {
            per_object: vec![],
            background: vec![1.0, 0.0],
        };
        assert!((precision_likelihood(&preds, &mp) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn precision_likelihood_matches_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let (preds, _, _) = random_instance(&mut rng, 1, 10, 2);
            let background: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mp = MatchProbabilities {
                per_object: vec![],
                background: background.clone(),
            };
            let got = precision_likelihood(&preds, &mp);
            let mut expected = 1.0;
            for (j, &bg) in background.iter().enumerate() {
                let probs: Vec<f64> = preds.logits[j].iter().map(|&z| sigmoid(z)).collect();
                let pbg: f64 = probs.iter().map(|&p| 1.0 - p).product();
                expected *= 1.0 - bg * (1.0 - pbg);
            }
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn customized_loss_log_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let (preds, gts, anchors) = random_instance(&mut rng, 2, 15, 2);
            let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
            let bags = build_anchor_bags(&boxes, &anchors, 4).unwrap();
            let decoded: Vec<BBox> = anchors
                .iter()
                .zip(&preds.deltas)
                .map(|(a, d)| crate::geometry::decode_deltas(a, d).unwrap())
                .collect();
            let mp = compute_match_probabilities(&bags, &decoded, &boxes, 0.3, anchors.len());
            let l = customized_loss_max(&preds, &gts, &anchors, &bags, &mp, 0.75).unwrap();
            let recall = recall_likelihood(&preds, &gts, &anchors, &bags, 0.75).unwrap();
            let precision = precision_likelihood(&preds, &mp);
            assert!((l + recall.ln() + precision.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn customized_loss_trivial_values() {
        // Both factors 1 => loss 0: single perfect anchor, everything else matched.
        let anchor = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gt = GtBox { bbox: anchor, class: 0 };
        let preds = Predictions {
            logits: vec![vec![45.0]],
            deltas: vec![[0.0; 4]],
        };
        let bags = build_anchor_bags(&[anchor], &[anchor], 1).unwrap();
        let decoded = vec![anchor];
        let mp = compute_match_probabilities(&bags, &decoded, &[anchor], 0.6, 1);
        let l = customized_loss_max(&preds, &[gt], &[anchor], &bags, &mp, 0.75).unwrap();
        assert!(l.abs() < 1e-10);
    }

    #[test]
    fn mean_max_values() {
        assert_eq!(mean_max(&[0.3, 0.3, 0.3]), 0.3);
        assert_eq!(mean_max(&[0.0]), 0.0);
        assert!((mean_max(&[0.2, 0.8]) - 0.68).abs() < 1e-12);
    }

    #[test]
    fn mean_max_bounded_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..500 {
            let xs: Vec<f64> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0.0..1.0)).collect();
            let m = mean_max(&xs);
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }
        // Max-like limit: one element toward 1 dominates.
        let m = mean_max(&[0.9999999, 0.2, 0.1]);
        assert!((m - 0.9999999).abs() < 1e-4);
        // Mean-like limit for uniformly small inputs.
        let xs = [0.01, 0.02, 0.03];
        let mean = xs.iter().sum::<f64>() / 3.0;
        assert!((mean_max(&xs) - mean).abs() <= 0.03);
    }

    #[test]
    fn focal_term_values() {
        assert_eq!(focal_term(0.0, 2.0), 0.0);
        assert!((focal_term(0.5, 2.0) - 0.25 * 2.0f64.ln()).abs() < 1e-15);
        // gamma = 0 reduces to -log(1 - x).
        assert!((focal_term(0.3, 0.0) - -(0.7f64.ln())).abs() < 1e-15);
        // Strictly increasing on (0, 1).
        assert!(focal_term(0.6, 2.0) > focal_term(0.5, 2.0));
    }

    #[test]
    fn focal_term_grad_matches_finite_differences() {
        for &x in &[0.1, 0.4, 0.7, 0.95] {
            let num = oracles::central_difference(|v| focal_term(v, 2.0), x, 1e-7);
            assert!((num - focal_term_grad(x, 2.0)).abs() < 1e-6);
        }
    }

    fn loss_with_fixed_matching(
        preds: &Predictions,
        gts: &[GtBox],
        anchors: &[BBox],
        bags: &[AnchorBag],
        mp: &MatchProbabilities,
        hp: &HyperParams,
    ) -> f64 {
        free_anchor_loss(preds, gts, anchors, bags, mp, hp).unwrap().total
    }

    #[test]
    fn free_anchor_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let hp = HyperParams {
            bag_size: 5,
            ..HyperParams::default()
        };
        for trial in 0..20 {
            let (preds, gts, anchors) = random_instance(&mut rng, 2, 20, 3);
            let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
            let bags = build_anchor_bags(&boxes, &anchors, hp.bag_size).unwrap();
            let decoded: Vec<BBox> = anchors
                .iter()
                .zip(&preds.deltas)
                .map(|(a, d)| crate::geometry::decode_deltas(a, d).unwrap())
                .collect();
            let mp = compute_match_probabilities(&bags, &decoded, &boxes, hp.match_threshold, anchors.len());
            let out = free_anchor_loss(&preds, &gts, &anchors, &bags, &mp, &hp).unwrap();

            let h = 1e-6;
            let mut max_rel: f64 = 0.0;
            for j in 0..preds.num_anchors() {
                for c in 0..preds.num_classes() {
                    let mut p = preds.clone();
                    p.logits[j][c] += h;
                    let up = loss_with_fixed_matching(&p, &gts, &anchors, &bags, &mp, &hp);
                    p.logits[j][c] -= 2.0 * h;
                    let down = loss_with_fixed_matching(&p, &gts, &anchors, &bags, &mp, &hp);
                    let num = (up - down) / (2.0 * h);
                    let ana = out.grad_logits[j][c];
                    let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                    max_rel = max_rel.max(rel);
                }
                for d in 0..4 {
                    let mut p = preds.clone();
                    p.deltas[j][d] += h;
                    let up = loss_with_fixed_matching(&p, &gts, &anchors, &bags, &mp, &hp);
                    p.deltas[j][d] -= 2.0 * h;
                    let down = loss_with_fixed_matching(&p, &gts, &anchors, &bags, &mp, &hp);
                    let num = (up - down) / (2.0 * h);
                    let ana = out.grad_deltas[j][d];
                    let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                    max_rel = max_rel.max(rel);
                }
            }
            assert!(max_rel < 1e-5, "trial {trial}: max relative error {max_rel}");
        }
    }

    #[test]
    fn free_anchor_empty_image_uses_fallback_weight() {
        let preds = Predictions {
            logits: vec![vec![0.3, -0.2]; 4],
            deltas: vec![[0.0; 4]; 4],
        };
        let anchors: Vec<BBox> = (0..4)
            .map(|i| BBox::new(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 8.0, 8.0))
            .collect();
        let mp = MatchProbabilities {
            per_object: vec![],
            background: vec![1.0; 4],
        };
        let hp = HyperParams::default();
        let out = free_anchor_loss(&preds, &[], &anchors, &[], &mp, &hp).unwrap();
        assert_eq!(out.recall_term, 0.0);
        let w2 = (1.0 - hp.alpha) / hp.bag_size as f64;
        let expected: f64 = (0..4)
            .map(|j| {
                let probs: Vec<f64> = preds.logits[j].iter().map(|&z| sigmoid(z)).collect();
                let pbg: f64 = probs.iter().map(|&p| 1.0 - p).product();
                w2 * focal_term(1.0 - pbg, hp.gamma)
            })
            .sum();
        assert!((out.total - expected).abs() < 1e-12);
    }

    #[test]
    fn free_anchor_loss_vanishes_for_saturated_perfect_prediction() {
        // Single object, its bag's best anchor perfect, other anchors silent.
        let anchor = BBox::new(0.0, 0.0, 10.0, 10.0);
        let far = BBox::new(30.0, 30.0, 40.0, 40.0);
        let anchors = vec![anchor, far];
        let gts = vec![GtBox { bbox: anchor, class: 0 }];
        let boxes = vec![anchor];
        let hp = HyperParams {
            bag_size: 1,
            ..HyperParams::default()
        };
        let bags = build_anchor_bags(&boxes, &anchors, hp.bag_size).unwrap();
        let mut last = f64::INFINITY;
        for &s in &[5.0, 10.0, 20.0, 40.0] {
            let preds = Predictions {
                logits: vec![vec![s], vec![-s]],
                deltas: vec![[0.0; 4]; 2],
            };
            let decoded = vec![anchor, far];
            let mp = compute_match_probabilities(&bags, &decoded, &boxes, hp.match_threshold, 2);
            let out = free_anchor_loss(&preds, &gts, &anchors, &bags, &mp, &hp).unwrap();
            assert!(out.total < last);
            last = out.total;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn free_anchor_loss_invariant_to_orderings() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (preds, gts, anchors) = random_instance(&mut rng, 3, 18, 2);
        let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let hp = HyperParams {
            bag_size: 4,
            ..HyperParams::default()
        };
        let bags = build_anchor_bags(&boxes, &anchors, hp.bag_size).unwrap();
        let decoded: Vec<BBox> = anchors
            .iter()
            .zip(&preds.deltas)
            .map(|(a, d)| crate::geometry::decode_deltas(a, d).unwrap())
            .collect();
        let mp = compute_match_probabilities(&bags, &decoded, &boxes, hp.match_threshold, anchors.len());
        let base = free_anchor_loss(&preds, &gts, &anchors, &bags, &mp, &hp).unwrap();

        // Shuffle anchors inside each bag.
        let mut bags2 = bags.clone();
        let mut mp2 = mp.clone();
        for (bag, probs) in bags2.iter_mut().zip(&mut mp2.per_object) {
            bag.anchors.reverse();
            bag.ious.reverse();
            probs.reverse();
        }
        let shuffled = free_anchor_loss(&preds, &gts, &anchors, &bags2, &mp2, &hp).unwrap();
        assert!((base.total - shuffled.total).abs() < 1e-12);

        // Reverse object order.
        let gts_r: Vec<GtBox> = gts.iter().rev().cloned().collect();
        let boxes_r: Vec<BBox> = boxes.iter().rev().cloned().collect();
        let bags_r = build_anchor_bags(&boxes_r, &anchors, hp.bag_size).unwrap();
        let mp_r = compute_match_probabilities(&bags_r, &decoded, &boxes_r, hp.match_threshold, anchors.len());
        let reversed = free_anchor_loss(&preds, &gts_r, &anchors, &bags_r, &mp_r, &hp).unwrap();
        assert!((base.total - reversed.total).abs() < 1e-12);
    }

    #[test]
    fn free_anchor_loss_decreases_in_best_anchor_confidence() {
        // -log MeanMax is strictly decreasing in each element of X.
        let xs = [0.3, 0.1, 0.05];
        let base = -mean_max(&xs).ln();
        let better = [0.4, 0.1, 0.05];
        assert!(-mean_max(&better).ln() < base);
    }

    #[test]
    fn gradient_symmetric_instance() {
        // Two identical objects with identical (disjoint) anchor neighborhoods.
        let a0 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let a1 = BBox::new(100.0, 0.0, 110.0, 10.0);
        let anchors = vec![a0, a1];
        let gts = vec![
            GtBox { bbox: BBox::new(1.0, 1.0, 11.0, 11.0), class: 0 },
            GtBox { bbox: BBox::new(101.0, 1.0, 111.0, 11.0), class: 0 },
        ];
        let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let hp = HyperParams { bag_size: 1, ..HyperParams::default() };
        let bags = build_anchor_bags(&boxes, &anchors, 1).unwrap();
        let preds = Predictions {
            logits: vec![vec![0.4, -0.3], vec![0.4, -0.3]],
            deltas: vec![[0.1, 0.1, 0.0, 0.0]; 2],
        };
        let decoded: Vec<BBox> = anchors
            .iter()
            .zip(&preds.deltas)
            .map(|(a, d)| crate::geometry::decode_deltas(a, d).unwrap())
            .collect();
        let mp = compute_match_probabilities(&bags, &decoded, &boxes, hp.match_threshold, 2);
        let out = free_anchor_loss(&preds, &gts, &anchors, &bags, &mp, &hp).unwrap();
        assert_eq!(out.grad_logits[0], out.grad_logits[1]);
        assert_eq!(out.grad_deltas[0], out.grad_deltas[1]);
    }

    #[test]
    fn gradient_unmatched_anchor_background_chain_rule() {
        // Anchor in no bag with P{a_j in A_-} = 1: no recall gradient, and the
        // background gradient equals the scalar chain rule on FL(1 - P^bg).
        let preds = Predictions {
            logits: vec![vec![0.7, -0.4]],
            deltas: vec![[0.2, 0.0, 0.0, 0.0]],
        };
        let anchors = vec![BBox::new(0.0, 0.0, 8.0, 8.0)];
        let mp = MatchProbabilities {
            per_object: vec![],
            background: vec![1.0],
        };
        let hp = HyperParams::default();
        let out = free_anchor_loss(&preds, &[], &anchors, &[], &mp, &hp).unwrap();
        assert_eq!(out.grad_deltas[0], [0.0; 4]);
        let (_, w2) = hp.weights(0);
        for c in 0..2 {
            let num = {
                let mut p = preds.clone();
                let h = 1e-6;
                p.logits[0][c] += h;
                let up = free_anchor_loss(&p, &[], &anchors, &[], &mp, &hp).unwrap().total;
                p.logits[0][c] -= 2.0 * h;
                let down = free_anchor_loss(&p, &[], &anchors, &[], &mp, &hp).unwrap().total;
                (up - down) / (2.0 * h)
            };
            assert!((num - out.grad_logits[0][c]).abs() < 1e-8);
            // Direct scalar chain rule.
            let pbg: f64 = preds.logits[0].iter().map(|&z| 1.0 - sigmoid(z)).product();
            let expected = w2 * focal_term_grad(1.0 - pbg, hp.gamma) * sigmoid(preds.logits[0][c]) * pbg;
            assert!((expected - out.grad_logits[0][c]).abs() < 1e-12);
        }
    }
}
