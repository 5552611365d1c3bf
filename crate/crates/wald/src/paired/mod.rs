//! Paired-annotation data model, synthetic weakly-aligned scene generation,
//! global shift application for robustness sweeps, and shift statistics.
//!
//! A scene is a two-modality image pair plus per-object paired boxes: every
//! object carries its box in the reference modality and in the sensed
//! modality (or just one of them, in which case it is flagged unpaired).
//! Synthetic scenes also record the generating shift field as ground truth.

mod generator;
mod io;

pub use generator::{
    crop_values, generate_dataset, generate_scene, generate_scene_with, scene_seed,
    GeneratorParams, RgbdParams,
};
pub use io::{
    load_annotations, load_dataset, read_scene_images, save_annotations, save_dataset,
    write_scene_images, SceneAnnotations, ANNOTATION_SCHEMA_VERSION,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::box3d::{Box3D, CameraIntrinsics};
use crate::geometry::{Box2D, Extent};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("scene {scene_id:?}, field {field:?}: {message}")]
    Annotation { scene_id: String, field: String, message: String },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("malformed scene image file {path:?}: {message}")]
    ImageFormat { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("annotation parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Occlusion level of an annotated object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Occlusion {
    #[default]
    None,
    Partial,
    Heavy,
}

/// One object with its per-modality boxes and pair identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedObject {
    /// Unique index within the scene, tying the two modality boxes together.
    pub pair_id: u32,
    pub class_label: String,
    pub ref_box: Option<Box2D>,
    pub sensed_box: Option<Box2D>,
    /// True iff the object appears in exactly one modality.
    pub unpaired: bool,
    pub occlusion: Occlusion,
    /// True when a box extends beyond its image extent.
    pub truncated: bool,
    /// Metric depth values (meters) inside the sensed region, for 3-D tasks.
    pub depth_patch: Option<Vec<f64>>,
    /// Ground-truth 3-D box for synthetic RGB-D scenes.
    pub box3d: Option<Box3D>,
}

impl PairedObject {
    /// Pixel displacement (sensed center - reference center), when paired.
    pub fn shift(&self) -> Option<(f64, f64)> {
        match (&self.ref_box, &self.sensed_box) {
            (Some(r), Some(s)) => Some((s.x - r.x, s.y - r.y)),
            _ => None,
        }
    }

    pub fn validate(&self, scene_id: &str, extent: Extent) -> Result<(), DataError> {
        let err = |field: &str, message: String| DataError::Annotation {
            scene_id: scene_id.to_string(),
            field: field.to_string(),
            message,
        };
        let n_present = self.ref_box.is_some() as u8 + self.sensed_box.is_some() as u8;
        if n_present == 0 {
            return Err(err("ref/sensed", "object has neither a ref nor a sensed box".into()));
        }
        if self.unpaired != (n_present == 1) {
            return Err(err(
                "unpaired",
                format!("unpaired={} but {} box(es) present", self.unpaired, n_present),
            ));
        }
        for (field, b) in [("ref", &self.ref_box), ("sensed", &self.sensed_box)] {
            if let Some(b) = b {
                b.validate().map_err(|e| err(field, e.to_string()))?;
                if !extent.contains(b) && !self.truncated {
                    return Err(err(
                        field,
                        "box extends beyond the image extent but is not flagged truncated".into(),
                    ));
                }
            }
        }
        if let Some(b3) = &self.box3d {
            b3.validate().map_err(|e| err("box3d", e.to_string()))?;
        }
        Ok(())
    }
}

/// Smooth ground-truth displacement field of a synthetic scene.
///
/// The displacement at pixel `(x, y)` points along a per-scene direction,
/// with magnitude `base_shift` at the image center growing quadratically
/// (by `edge_gain`) over the length scale `smoothness_scale` toward the
/// borders. Per-object Gaussian noise is added on top of this field at
/// generation time and is not part of the recorded field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftField {
    pub direction: (f64, f64),
    pub base_shift: f64,
    pub edge_gain: f64,
    pub smoothness_scale: f64,
    pub canvas: Extent,
}

impl ShiftField {
    /// Displacement (dx, dy) in pixels at image position (x, y).
    pub fn displacement_at(&self, x: f64, y: f64) -> (f64, f64) {
        let cx = self.canvas.width as f64 / 2.0;
        let cy = self.canvas.height as f64 / 2.0;
        let u = (x - cx) / self.smoothness_scale;
        let v = (y - cy) / self.smoothness_scale;
        let profile = 1.0 + (self.edge_gain - 1.0) * (u * u + v * v);
        let mag = self.base_shift * profile;
        (self.direction.0 * mag, self.direction.1 * mag)
    }
}

/// Configuration of the synthetic shift field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftFieldConfig {
    /// Mean displacement magnitude at the image center, pixels.
    pub base_shift: f64,
    /// Magnitude multiplier reached one `smoothness_scale` from the center.
    pub edge_gain: f64,
    /// Correlation length of the field, pixels.
    pub smoothness_scale: f64,
    /// Per-object Gaussian jitter on top of the field, pixels.
    pub noise_sigma: f64,
    /// Probability that an object appears in only one modality.
    pub unpaired_rate: f64,
}

impl ShiftFieldConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.smoothness_scale > 0.0) {
            return Err(DataError::Generation(format!(
                "smoothness_scale must be positive, got {}",
                self.smoothness_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.unpaired_rate) {
            return Err(DataError::Generation(format!(
                "unpaired_rate must lie in [0, 1], got {}",
                self.unpaired_rate
            )));
        }
        Ok(())
    }

    /// Perfectly aligned configuration (zero field, no noise, all paired).
    pub fn aligned() -> Self {
        ShiftFieldConfig {
            base_shift: 0.0,
            edge_gain: 1.0,
            smoothness_scale: 32.0,
            noise_sigma: 0.0,
            unpaired_rate: 0.0,
        }
    }
}

/// A two-modality image pair with its paired annotations.
///
/// For RGB-D scenes the sensed image holds metric depth in meters; for
/// intensity pairs both images are in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub scene_id: String,
    pub extent: Extent,
    pub ref_image: Array2<f64>,
    pub sensed_image: Array2<f64>,
    pub objects: Vec<PairedObject>,
    pub shift_field: Option<ShiftField>,
    pub intrinsics: Option<CameraIntrinsics>,
}

impl ScenePair {
    pub fn validate(&self) -> Result<(), DataError> {
        let (h, w) = self.ref_image.dim();
        if (w, h) != (self.extent.width, self.extent.height)
            || self.sensed_image.dim() != (h, w)
        {
            return Err(DataError::Annotation {
                scene_id: self.scene_id.clone(),
                field: "extent".into(),
                message: "image dimensions disagree with the declared extent".into(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for obj in &self.objects {
            obj.validate(&self.scene_id, self.extent)?;
            if !seen.insert(obj.pair_id) {
                return Err(DataError::Annotation {
                    scene_id: self.scene_id.clone(),
                    field: "pair_id".into(),
                    message: format!("duplicate pair_id {}", obj.pair_id),
                });
            }
        }
        Ok(())
    }

    /// Reference ground-truth boxes (objects present in the reference
    /// modality).
    pub fn ref_boxes(&self) -> impl Iterator<Item = (&PairedObject, &Box2D)> {
        self.objects.iter().filter_map(|o| o.ref_box.as_ref().map(|b| (o, b)))
    }
}

/// Translate the sensed side of a scene by an integer pixel offset,
/// zero-padding the image. Sensed boxes move identically; the reference side
/// is untouched. Boxes pushed over the border are flagged truncated.
pub fn shift_image(scene: &ScenePair, delta: (i32, i32)) -> ScenePair {
    let (dx, dy) = delta;
    let (h, w) = scene.sensed_image.dim();
    let mut sensed = Array2::zeros((h, w));
    for y in 0..h as i32 {
        let sy = y - dy;
        if sy < 0 || sy >= h as i32 {
            continue;
        }
        for x in 0..w as i32 {
            let sx = x - dx;
            if sx < 0 || sx >= w as i32 {
                continue;
            }
            sensed[(y as usize, x as usize)] = scene.sensed_image[(sy as usize, sx as usize)];
        }
    }
    let objects = scene
        .objects
        .iter()
        .map(|o| {
            let mut o = o.clone();
            if let Some(b) = o.sensed_box.take() {
                let moved = b.translated(dx as f64, dy as f64);
                o.truncated = !scene.extent.contains(&moved)
                    || o.ref_box.map(|r| !scene.extent.contains(&r)).unwrap_or(false);
                o.sensed_box = Some(moved);
            }
            o
        })
        .collect();
    ScenePair { sensed_image: sensed, objects, ..scene.clone() }
}

/// Histogram of per-object shift magnitudes and directions over a dataset.
/// Unpaired objects are excluded from the histograms and counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftStatistics {
    /// Counts per 1-pixel magnitude bin; the last bin absorbs the overflow.
    pub magnitude_hist: Vec<u64>,
    /// Counts per 45-degree direction sector, starting at +x.
    pub direction_hist: [u64; 8],
    pub n_paired: u64,
    pub n_unpaired: u64,
    pub mean_magnitude: f64,
}

impl ShiftStatistics {
    pub const MAGNITUDE_BINS: usize = 33;

    /// Center of the most populated magnitude bin, in pixels.
    pub fn mode_magnitude(&self) -> f64 {
        let (best, _) = self
            .magnitude_hist
            .iter()
            .enumerate()
            .max_by_key(|(i, &c)| (c, usize::MAX - i))
            .unwrap_or((0, &0));
        best as f64 + 0.5
    }

    /// Fraction of paired objects with |shift| of at least `threshold` px.
    pub fn shifted_fraction(&self, threshold: f64) -> f64 {
        if self.n_paired == 0 {
            return 0.0;
        }
        let from_bin = threshold.ceil() as usize;
        let n: u64 = self.magnitude_hist.iter().skip(from_bin).sum();
        n as f64 / self.n_paired as f64
    }
}

/// Compute [`ShiftStatistics`] over every paired object in a dataset.
/// An empty dataset yields an empty report.
pub fn shift_statistics(dataset: &[ScenePair]) -> ShiftStatistics {
    let mut stats = ShiftStatistics {
        magnitude_hist: vec![0; ShiftStatistics::MAGNITUDE_BINS],
        direction_hist: [0; 8],
        n_paired: 0,
        n_unpaired: 0,
        mean_magnitude: 0.0,
    };
    let mut total = 0.0;
    for scene in dataset {
        for obj in &scene.objects {
            match obj.shift() {
                Some((dx, dy)) => {
                    let mag = (dx * dx + dy * dy).sqrt();
                    let bin = (mag.floor() as usize).min(ShiftStatistics::MAGNITUDE_BINS - 1);
                    stats.magnitude_hist[bin] += 1;
                    if mag > 0.0 {
                        let angle = dy.atan2(dx).rem_euclid(2.0 * std::f64::consts::PI);
                        let sector =
                            ((angle / (std::f64::consts::PI / 4.0)) as usize).min(7);
                        stats.direction_hist[sector] += 1;
                    }
                    stats.n_paired += 1;
                    total += mag;
                }
                None => stats.n_unpaired += 1,
            }
        }
    }
    if stats.n_paired > 0 {
        stats.mean_magnitude = total / stats.n_paired as f64;
    }
    stats
}
