//! Toy differentiable detector: deterministic pooled-statistics features per
//! anchor window plus a shared two-layer perceptron head emitting k class
//! logits and 4 box deltas. The nonlinearity (tanh) is smooth everywhere so
//! finite-difference checks stay clean.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::loss::Predictions;
use crate::synthdata::Scene;

/// Dimension of the per-anchor feature vector produced by [`extract_features`].
pub const FEATURE_DIM: usize = 17;

/// Default hidden width of the MLP head.
pub const DEFAULT_HIDDEN: usize = 32;

/// Prior foreground probability used for classification bias initialization.
pub const DEFAULT_PRIOR: f64 = 0.02;

///// Head parameters: two affine layers with a tanh in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// First layer weights, `hidden_dim x feat_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Second layer weights, `(num_classes + 4) x hidden_dim`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ModelParams {
    pub fn output_dim(&self) -> usize {
        self.num_classes + 4
    }

    pub fn num_parameters(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Gradients with the same shapes as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(params: &ModelParams) -> Self {
        ParamGrads {
            w1: vec![0.0; params.w1.len()],
            b1: vec![0.0; params.b1.len()],
            w2: vec![0.0; params.w2.len()],
            b2: vec![0.0; params.b2.len()],
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self
            .w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(&mut self.b2)
        {
            *v *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite())
    }
}

/// Initialize head parameters: Xavier-uniform weights from `seed`, zero
/// hidden biases, classification biases at -log((1 - rho) / rho) so every
/// anchor starts with class probability rho.
pub fn init_params(feat_dim: usize, num_classes: usize, hidden_dim: usize, rho: f64, seed: u64) -> Result<ModelParams> {
    if feat_dim == 0 || num_classes == 0 || hidden_dim == 0 {
        return Err(Error::Config("model dimensions must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&rho) || rho <= 0.0 {
        return Err(Error::Config(format!("prior rho must be in (0, 1), got {rho}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_dim = num_classes + 4;
    let lim1 = (6.0 / (feat_dim + hidden_dim) as f64).sqrt();
    let lim2 = (6.0 / (hidden_dim + out_dim) as f64).sqrt();
    let w1: Vec<f64> = (0..hidden_dim * feat_dim)
        .map(|_| rng.gen_range(-lim1..lim1))
        .collect();
    let w2: Vec<f64> = (0..out_dim * hidden_dim)
        .map(|_| rng.gen_range(-lim2..lim2))
        .collect();
    let cls_bias = -((1.0 - rho) / rho).ln();
    let mut b2 = vec![cls_bias; num_classes];
    b2.extend(std::iter::repeat(0.0).take(4));
    Ok(ModelParams {
        feat_dim,
        hidden_dim,
        num_classes,
        seed,
        w1,
        b1: vec![0.0; hidden_dim],
        w2,
        b2,
    })
}

struct Window {
    x1: usize,
    y1: usize,
    x2: usize,
    y2: usize,
}

fn clip_window(anchor: &BBox, scene: &Scene) -> Option<Window> {
    let x1 = anchor.x1.max(0.0).floor() as usize;
    let y1 = anchor.y1.max(0.0).floor() as usize;
    let x2 = (anchor.x2.min(scene.width as f64).ceil() as usize).min(scene.width);
    let y2 = (anchor.y2.min(scene.height as f64).ceil() as usize).min(scene.height);
    if x1 >= x2 || y1 >= y2 {
        None
    } else {
        Some(Window { x1, y1, x2, y2 })
    }
}

/// Per-anchor pooled statistics of the scene raster restricted to the anchor
/// window, plus window shape descriptors. Content features depend only on the
/// pixels under the window, never on absolute position, so translating a
/// scene by one stride permutes features together with the anchors.
pub fn extract_features(scene: &Scene, anchors: &[BBox]) -> Vec<Vec<f64>> {
    anchors
        .iter()
        .map(|anchor| {
            let mut f = vec![0.0f64; FEATURE_DIM];
            // Shape descriptors are defined even for off-image anchors.
            f[9] = (anchor.width() / 16.0).ln();
            f[10] = (anchor.height() / 16.0).ln();
            f[11] = (anchor.width() / anchor.height()).ln();
            let Some(w) = clip_window(anchor, scene) else {
                return f;
            };
            let (cx, cy) = ((w.x1 + w.x2) as f64 / 2.0, (w.y1 + w.y2) as f64 / 2.0);
            let mut sum = 0.0;
            let mut quad = [0.0f64; 4];
            let mut quad_n = [0usize; 4];
            let mut row_phase = (0.0, 0usize, 0.0, 0usize);
            let mut col_phase = (0.0, 0usize, 0.0, 0usize);
            let mut gx = (0.0, 0usize);
            let mut gy = (0.0, 0usize);
            for y in w.y1..w.y2 {
                for x in w.x1..w.x2 {
                    let v = scene.pixel(x, y) as f64 / 255.0;
                    sum += v;
                    let q = usize::from((x as f64 + 0.5) >= cx) + 2 * usize::from((y as f64 + 0.5) >= cy);
                    quad[q] += v;
                    quad_n[q] += 1;
                    if y % 4 < 2 {
                        row_phase.0 += v;
                        row_phase.1 += 1;
                    } else {
                        row_phase.2 += v;
                        row_phase.3 += 1;
                    }
                    if x % 4 < 2 {
                        col_phase.0 += v;
                        col_phase.1 += 1;
                    } else {
                        col_phase.2 += v;
                        col_phase.3 += 1;
                    }
                    if x + 1 < w.x2 {
                        gx.0 += (scene.pixel(x + 1, y) as f64 / 255.0 - v).abs();
                        gx.1 += 1;
                    }
                    if y + 1 < w.y2 {
                        gy.0 += (scene.pixel(x, y + 1) as f64 / 255.0 - v).abs();
                        gy.1 += 1;
                    }
                }
            }
            let count = ((w.x2 - w.x1) * (w.y2 - w.y1)) as f64;
            f[0] = sum / count;
            for q in 0..4 {
                f[1 + q] = if quad_n[q] > 0 { quad[q] / quad_n[q] as f64 } else { 0.0 };
            }
            let phase_mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
            f[5] = phase_mean(row_phase.0, row_phase.1) - phase_mean(row_phase.2, row_phase.3);
            f[6] = phase_mean(col_phase.0, col_phase.1) - phase_mean(col_phase.2, col_phase.3);
            f[7] = if gx.1 > 0 { gx.0 / gx.1 as f64 } else { 0.0 };
            f[8] = if gy.1 > 0 { gy.0 / gy.1 as f64 } else { 0.0 };
            f[12] = count / anchor.area().max(1e-9);
            // Intensity centroid and spread over a 2x dilated window: a
            // wider receptive field so box regression can see object mass
            // that lies outside the anchor itself.
            let (acx, acy) = anchor.center();
            let dilated = BBox::new(
                acx - anchor.width(),
                acy - anchor.height(),
                acx + anchor.width(),
                acy + anchor.height(),
            );
            if let Some(d) = clip_window(&dilated, scene) {
                let (dcx, dcy) = ((d.x1 + d.x2) as f64 / 2.0, (d.y1 + d.y2) as f64 / 2.0);
                let (hw, hh) = ((d.x2 - d.x1) as f64 / 2.0, (d.y2 - d.y1) as f64 / 2.0);
                let mut mass = 0.0;
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                for y in d.y1..d.y2 {
                    for x in d.x1..d.x2 {
                        let v = scene.pixel(x, y) as f64 / 255.0;
                        let (px, py) = (x as f64 + 0.5 - dcx, y as f64 + 0.5 - dcy);
                        mass += v;
                        mx += v * px;
                        my += v * py;
                        sxx += v * px * px;
                        syy += v * py * py;
                    }
                }
                if mass > 1e-9 {
                    let (ex, ey) = (mx / mass, my / mass);
                    f[13] = ex / hw;
                    f[14] = ey / hh;
                    f[15] = (sxx / mass - ex * ex).max(0.0).sqrt() / hw;
                    f[16] = (syy / mass - ey * ey).max(0.0).sqrt() / hh;
                }
            }
            f
        })
        .collect()
}

fn hidden_activations(params: &ModelParams, features: &[f64]) -> Vec<f64> {
    let d = params.feat_dim;
    (0..params.hidden_dim)
        .map(|u| {
            let mut s = params.b1[u];
            for v in 0..d {
                s += params.w1[u * d + v] * features[v];
            }
            s.tanh()
        })
        .collect()
}

/// Forward pass over all anchors. Class logits stay pre-sigmoid inside
/// [`Predictions`]; deltas pass through raw.
pub fn forward(params: &ModelParams, features: &[Vec<f64>]) -> Result<Predictions> {
    let k = params.num_classes;
    let mut logits = Vec::with_capacity(features.len());
    let mut deltas = Vec::with_capacity(features.len());
    for f in features {
        if f.len() != params.feat_dim {
            return Err(Error::DimensionMismatch(format!(
                "feature dim {} vs model {}",
                f.len(),
                params.feat_dim
            )));
        }
        let h = hidden_activations(params, f);
        let out: Vec<f64> = (0..params.output_dim())
            .map(|o| {
                let mut s = params.b2[o];
                for u in 0..params.hidden_dim {
                    s += params.w2[o * params.hidden_dim + u] * h[u];
                }
                s
            })
            .collect();
        logits.push(out[..k].to_vec());
        deltas.push([out[k], out[k + 1], out[k + 2], out[k + 3]]);
    }
    Ok(Predictions { logits, deltas })
}

/// Exact chain rule through the head, given upstream gradients w.r.t. the
/// per-anchor logits and deltas.
pub fn backward(
    params: &ModelParams,
    features: &[Vec<f64>],
    grad_logits: &[Vec<f64>],
    grad_deltas: &[[f64; 4]],
) -> ParamGrads {
    let d = params.feat_dim;
    let k = params.num_classes;
    let hidden = params.hidden_dim;
    let mut g = ParamGrads::zeros(params);
    for (a, f) in features.iter().enumerate() {
        let h = hidden_activations(params, f);
        let mut dout = vec![0.0f64; params.output_dim()];
        dout[..k].copy_from_slice(&grad_logits[a]);
        dout[k..].copy_from_slice(&grad_deltas[a]);
        let mut dh = vec![0.0f64; hidden];
        for o in 0..params.output_dim() {
            let go = dout[o];
            if go == 0.0 {
                continue;
            }
            g.b2[o] += go;
            for u in 0..hidden {
                g.w2[o * hidden + u] += go * h[u];
                dh[u] += go * params.w2[o * hidden + u];
            }
        }
        for u in 0..hidden {
            let draw = dh[u] * (1.0 - h[u] * h[u]);
            if draw == 0.0 {
                continue;
            }
            g.b1[u] += draw;
            for v in 0..d {
                g.w1[u * d + v] += draw * f[v];
            }
        }
    }
    g
}

/// Plain SGD update: theta <- theta - lambda * grad.
pub fn sgd_step(params: &mut ModelParams, grads: &ParamGrads, learning_rate: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            term: "parameter gradients".into(),
        });
    }
    for (p, g) in params.w1.iter_mut().zip(&grads.w1) {
        *p -= learning_rate * g;
    }
    for (p, g) in params.b1.iter_mut().zip(&grads.b1) {
        *p -= learning_rate * g;
    }
    for (p, g) in params.w2.iter_mut().zip(&grads.w2) {
        *p -= learning_rate * g;
    }
    for (p, g) in params.b2.iter_mut().zip(&grads.b2) {
        *p -= learning_rate * g;
    }
    Ok(())
}

/// Versioned checkpoint document; load/save round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: usize,
    pub params: ModelParams,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(iteration: usize, params: ModelParams) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            iteration,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
