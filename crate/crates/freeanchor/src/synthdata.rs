//! Deterministic synthetic scene generation: square and slender rectangles
//! with class-dependent fill patterns, rendered onto an intensity raster.
//!
//! The generator is a pure function of its spec (including the seed); scene
//! `i` draws from an independent RNG stream so generation order never matters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, GtBox};

/// Maximum IoU allowed between two ground-truth boxes in one scene.
pub const GT_IOU_CAP: f64 = 0.7;

const PLACEMENT_RETRIES: usize = 50;

/// One synthetic image: intensity raster plus ground-truth annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// Row-major 8-bit intensities, length `width * height`.
    pub raster: Vec<u8>,
    pub objects: Vec<GtBox>,
}

impl Scene {
    pub fn crowdedness(&self) -> usize {
        self.objects.len()
    }

    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.raster[y * self.width + x]
    }
}

/// Shape category of a generated object.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeKind {
    Square,
    SlenderHorizontal,
    SlenderVertical,
}

/// Generation parameters. The three shape fractions must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub square_frac: f64,
    pub slender_h_frac: f64,
    pub slender_v_frac: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Aspect range for square-ish objects (>= 1; orientation randomized).
    pub square_aspect: (f64, f64),
    /// Aspect range for slender objects; slender means max(w/h, h/w) >= 3.
    pub slender_aspect: (f64, f64),
    /// Short-side range in pixels.
    pub size_range: (f64, f64),
    /// Amplitude of additive uniform noise in intensity units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_scenes: 100,
            width: 64,
            height: 64,
            num_classes: 3,
            square_frac: 1.0,
            slender_h_frac: 0.0,
            slender_v_frac: 0.0,
            min_objects: 1,
            max_objects: 3,
            square_aspect: (1.0, 1.5),
            slender_aspect: (3.0, 5.0),
            size_range: (8.0, 18.0),
            noise: 4.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let sum = self.square_frac + self.slender_h_frac + self.slender_v_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("shape fractions sum to {sum}, expected 1")));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.size_range.0 <= 0.0 || self.size_range.0 > self.size_range.1 {
            return Err(Error::Config("invalid size range".into()));
        }
        if self.slender_aspect.0 < 3.0 {
            return Err(Error::Config("slender aspect lower bound must be >= 3".into()));
        }
        Ok(())
    }
}

/// Fill intensity for class `c` at raster position (x, y). Class identity is
/// carried by the pattern, not only by geometry: solid, horizontal stripes,
/// vertical stripes, checkerboard, cycling for larger k.
fn pattern_value(class: usize, x: usize, y: usize) -> u8 {
    const HI: u8 = 230;
    const LO: u8 = 90;
    match class % 4 {
        0 => 200,
        1 => {
            if y % 4 < 2 {
                HI
            } else {
                LO
            }
        }
        2 => {
            if x % 4 < 2 {
                HI
            } else {
                LO
            }
        }
        _ => {
            if (x / 2 + y / 2) % 2 == 0 {
                HI
            } else {
                LO
            }
        }
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> ShapeKind {
    let u: f64 = rng.gen();
    if u < spec.square_frac {
        ShapeKind::Square
    } else if u < spec.square_frac + spec.slender_h_frac {
        ShapeKind::SlenderHorizontal
    } else {
        ShapeKind::SlenderVertical
    }
}

fn sample_object(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> Option<BBox> {
    let shape = sample_shape(rng, spec);
    let short = rng.gen_range(spec.size_range.0..=spec.size_range.1);
    let (w, h) = match shape {
        ShapeKind::Square => {
            let aspect = rng.gen_range(spec.square_aspect.0..=spec.square_aspect.1);
            if rng.gen() {
                (short * aspect, short)
            } else {
                (short, short * aspect)
            }
        }
        ShapeKind::SlenderHorizontal => {
            let aspect = rng.gen_range(spec.slender_aspect.0..=spec.slender_aspect.1);
            (short * aspect, short)
        }
        ShapeKind::SlenderVertical => {
            let aspect = rng.gen_range(spec.slender_aspect.0..=spec.slender_aspect.1);
            (short, short * aspect)
        }
    };
    let (wf, hf) = (spec.width as f64, spec.height as f64);
    if w >= wf || h >= hf {
        return None;
    }
    let x1 = rng.gen_range(0.0..(wf - w));
    let y1 = rng.gen_range(0.0..(hf - h));
    Some(BBox::new(x1, y1, x1 + w, y1 + h))
}

fn generate_scene(spec: &DatasetSpec, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<GtBox> = Vec::with_capacity(count);
    let mut skipped = 0usize;
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let Some(bbox) = sample_object(&mut rng, spec) else { continue };
            if objects.iter().all(|o| iou(&o.bbox, &bbox) <= GT_IOU_CAP) {
                let class = rng.gen_range(0..spec.num_classes);
                objects.push(GtBox { bbox, class });
                placed = true;
                break;
            }
        }
        if !placed {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!("scene {index}: skipped {skipped} objects after bounded placement retries");
    }

    let mut raster = vec![0u8; spec.width * spec.height];
    for obj in &objects {
        let x1 = obj.bbox.x1.max(0.0).floor() as usize;
        let y1 = obj.bbox.y1.max(0.0).floor() as usize;
        let x2 = (obj.bbox.x2.ceil() as usize).min(spec.width);
        let y2 = (obj.bbox.y2.ceil() as usize).min(spec.height);
        for y in y1..y2 {
            for x in x1..x2 {
                raster[y * spec.width + x] = pattern_value(obj.class, x, y);
            }
        }
    }
    if spec.noise > 0.0 {
        for v in raster.iter_mut() {
            let n: f64 = rng.gen_range(-spec.noise..=spec.noise);
            *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8;
        }
    }

    Scene {
        id: index as u64,
        width: spec.width,
        height: spec.height,
        raster,
        objects,
    }
}

/// Generate the full dataset. Deterministic under `spec.seed`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    Ok((0..spec.num_scenes).map(|i| generate_scene(spec, i)).collect())
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    id: u64,
    width: usize,
    height: usize,
    objects: Vec<ObjectRecord>,
    raster: String,
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    class: usize,
}

fn scene_to_record(scene: &Scene) -> SceneRecord {
    SceneRecord {
        id: scene.id,
        width: scene.width,
        height: scene.height,
        objects: scene
            .objects
            .iter()
            .map(|o| ObjectRecord {
                x1: o.bbox.x1,
                y1: o.bbox.y1,
                x2: o.bbox.x2,
                y2: o.bbox.y2,
                class: o.class,
            })
            .collect(),
        raster: BASE64.encode(&scene.raster),
    }
}

fn record_to_scene(rec: SceneRecord) -> Result<Scene> {
    let raster = BASE64.decode(rec.raster.as_bytes()).map_err(|e| Error::Scene {
        id: rec.id,
        msg: format!("raster base64 decode failed: {e}"),
    })?;
    if raster.len() != rec.width * rec.height {
        return Err(Error::Scene {
            id: rec.id,
            msg: format!(
                "raster length {} does not match {}x{}",
                raster.len(),
                rec.width,
                rec.height
            ),
        });
    }
    Ok(Scene {
        id: rec.id,
        width: rec.width,
        height: rec.height,
        raster,
        objects: rec
            .objects
            .into_iter()
            .map(|o| GtBox {
                bbox: BBox::new(o.x1, o.y1, o.x2, o.y2),
                class: o.class,
            })
            .collect(),
    })
}

fn is_gzip_path(path: &Path) -> bool {
    path.extension().map_or(false, |e| e == "gz")
}

/// Save scenes as JSON lines, one scene per line. A `.jsonl.gz` suffix
/// selects the gzip-compressed variant.
pub fn save_dataset(path: &Path, scenes: &[Scene]) -> Result<()> {
    let file = File::create(path)?;
    let mut writer: Box<dyn Write> = if is_gzip_path(path) {
        Box::new(BufWriter::new(flate2::write::GzEncoder::new(
            file,
            flate2::Compression::default(),
        )))
    } else {
        Box::new(BufWriter::new(file))
    };
    for scene in scenes {
        serde_json::to_writer(&mut writer, &scene_to_record(scene))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Load a JSON-lines dataset; errors carry the 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Vec<Scene>> {
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if is_gzip_path(path) {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut scenes = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        scenes.push(record_to_scene(rec)?);
    }
    Ok(scenes)
}
