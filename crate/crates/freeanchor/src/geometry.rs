//! Box arithmetic, anchor-grid generation, box coding, SmoothL1, and NMS.
//!
//! Everything here is a pure function on immutable inputs. Boxes are stored in
//! corner form `(x1, y1, x2, y2)`; center form `{x, y, w, h}` only appears
//! inside the delta coding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned bounding box in continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// Build from center form `{x, y, w, h}`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Aspect ratio as max(w/h, h/w); infinite for degenerate boxes.
    pub fn elongation(&self) -> f64 {
        let w = self.width();
        let h = self.height();
        if w <= 0.0 || h <= 0.0 {
            f64::INFINITY
        } else {
            (w / h).max(h / w)
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// A ground-truth annotation: box plus class label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class: usize,
}

/// Intersection over union of two boxes; 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Dense IoU matrix, entry `(i, j) = iou(objects[i], anchors[j])`.
///
/// An empty object list yields a `0 x |A|` matrix.
pub fn iou_matrix(objects: &[BBox], anchors: &[BBox]) -> Vec<Vec<f64>> {
    objects
        .iter()
        .map(|b| anchors.iter().map(|a| iou(b, a)).collect())
        .collect()
}

/// Configuration of the dense anchor grid over one or more feature levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorLayout {
    /// Grid stride per level, in pixels.
    pub strides: Vec<usize>,
    /// Anchor side length = stride * scale.
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub ratios: Vec<f64>,
    pub image_width: usize,
    pub image_height: usize,
}

impl AnchorLayout {
    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() {
            return Err(Error::Config("anchor layout has no strides".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("anchor layout has no scales".into()));
        }
        if self.ratios.is_empty() {
            return Err(Error::Config("anchor layout has no aspect ratios".into()));
        }
        for &s in &self.strides {
            if s == 0 || self.image_width / s == 0 || self.image_height / s == 0 {
                return Err(Error::Config(format!(
                    "stride {s} leaves no grid cell in a {}x{} image",
                    self.image_width, self.image_height
                )));
            }
            if self.image_width % s != 0 || self.image_height % s != 0 {
                return Err(Error::Config(format!(
                    "stride {s} does not divide image {}x{}",
                    self.image_width, self.image_height
                )));
            }
        }
        if self.scales.iter().any(|&x| x <= 0.0) || self.ratios.iter().any(|&x| x <= 0.0) {
            return Err(Error::Config("scales and ratios must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form anchor count: sum over levels of cells_w * cells_h * |scales| * |ratios|.
    pub fn anchor_count(&self) -> usize {
        self.strides
            .iter()
            .map(|&s| (self.image_width / s) * (self.image_height / s))
            .sum::<usize>()
            * self.scales.len()
            * self.ratios.len()
    }
}

/// Generate the dense anchor set with deterministic ordering:
/// level-major, then row-major over grid cells, then scale, then ratio.
pub fn generate_anchors(layout: &AnchorLayout) -> Result<Vec<BBox>> {
    layout.validate()?;
    let mut anchors = Vec::with_capacity(layout.anchor_count());
    for &stride in &layout.strides {
        let cells_w = layout.image_width / stride;
        let cells_h = layout.image_height / stride;
        let s = stride as f64;
        for iy in 0..cells_h {
            for ix in 0..cells_w {
                let cx = (ix as f64 + 0.5) * s;
                let cy = (iy as f64 + 0.5) * s;
                for &scale in &layout.scales {
                    let side = s * scale;
                    for &ratio in &layout.ratios {
                        let w = side * ratio.sqrt();
                        let h = side / ratio.sqrt();
                        anchors.push(BBox::from_center(cx, cy, w, h));
                    }
                }
            }
        }
    }
    Ok(anchors)
}

/// Encode a target box as regression deltas relative to an anchor
/// (standard R-CNN center/log-size parameterization).
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> Result<[f64; 4]> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(Error::InvalidBox(format!("zero-area anchor {anchor:?}")));
    }
    let (tw, th) = (target.width(), target.height());
    if tw <= 0.0 || th <= 0.0 {
        return Err(Error::InvalidBox(format!("zero-area target {target:?}")));
    }
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    Ok([
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (tw / aw).ln(),
        (th / ah).ln(),
    ])
}

/// Decode regression deltas back into a box; exact inverse of [`encode_deltas`].
pub fn decode_deltas(anchor: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(Error::InvalidBox(format!("zero-area anchor {anchor:?}")));
    }
    let (acx, acy) = anchor.center();
    let w = aw * deltas[2].exp();
    let h = ah * deltas[3].exp();
    if !w.is_finite() || !h.is_finite() {
        return Err(Error::NonFinite {
            term: "decoded box size".into(),
        });
    }
    Ok(BBox::from_center(
        acx + deltas[0] * aw,
        acy + deltas[1] * ah,
        w,
        h,
    ))
}

/// Scalar SmoothL1 kernel: 0.5 u^2 for |u| < 1, |u| - 0.5 otherwise.
pub fn smooth_l1_scalar(u: f64) -> f64 {
    let a = u.abs();
    if a < 1.0 {
        0.5 * u * u
    } else {
        a - 0.5
    }
}

/// Derivative of the SmoothL1 kernel; continuous through |u| = 1.
pub fn smooth_l1_scalar_grad(u: f64) -> f64 {
    if u.abs() < 1.0 {
        u
    } else {
        u.signum()
    }
}

/// SmoothL1 loss summed over the four delta coordinates.
pub fn smooth_l1(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| smooth_l1_scalar(p - t))
        .sum()
}

/// Gradient of [`smooth_l1`] w.r.t. `pred`.
pub fn smooth_l1_grad(pred: &[f64; 4], target: &[f64; 4]) -> [f64; 4] {
    let mut g = [0.0; 4];
    for d in 0..4 {
        g[d] = smooth_l1_scalar_grad(pred[d] - target[d]);
    }
    g
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; ties broken by lower input index.
pub fn nms(detections: &[(BBox, f64)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b].1
            .partial_cmp(&detections[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for &idx in &order {
        let suppressed = keep
            .iter()
            .any(|&k| iou(&detections[k].0, &detections[idx].0) > threshold);
        if !suppressed {
            keep.push(idx);
        }
    }
    keep
}
