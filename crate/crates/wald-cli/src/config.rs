//! Run configuration files and resolved-config bookkeeping. Every command
//! writes its fully resolved configuration and the tool version next to its
//! outputs, so a run can be reproduced from the output directory alone.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use wald::box3d::CameraIntrinsics;
use wald::detector::train::TrainOptions;
use wald::detector::ModelConfig;
use wald::geometry::Extent;
use wald::paired::{GeneratorParams, RgbdParams, ShiftFieldConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Dataset generation configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub schema_version: u32,
    pub canvas: Extent,
    pub scenes: usize,
    pub objects_per_scene: (usize, usize),
    pub master_seed: u64,
    pub shift: ShiftFieldConfig,
    pub classes: Vec<String>,
    pub size_range: (f64, f64),
    pub intensity_range: (f64, f64),
    pub sensed_intensity_scale: (f64, f64),
    pub background_noise: f64,
    pub field_scale_range: (f64, f64),
    pub distractors_per_scene: (usize, usize),
    pub rgbd: Option<RgbdConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RgbdConfig {
    pub intrinsics: CameraIntrinsics,
    pub depth_range: (f64, f64),
    pub background_depth: f64,
    pub class_dims: wald::box3d::ClassDims,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            canvas: Extent::new(64, 64),
            scenes: 100,
            objects_per_scene: (1, 3),
            master_seed: 42,
            shift: ShiftFieldConfig {
                base_shift: 3.0,
                edge_gain: 1.5,
                smoothness_scale: 32.0,
                noise_sigma: 0.5,
                unpaired_rate: 0.125,
            },
            classes: vec!["disc".to_string()],
            size_range: (7.0, 17.0),
            intensity_range: (0.5, 0.95),
            sensed_intensity_scale: (0.45, 1.0),
            background_noise: 0.05,
            field_scale_range: (0.4, 1.0),
            distractors_per_scene: (3, 5),
            rgbd: None,
        }
    }
}

impl GenConfig {
    pub fn generator_params(&self) -> GeneratorParams {
        let mut params = GeneratorParams::new(self.shift, self.canvas);
        params.classes = self.classes.clone();
        params.size_range = self.size_range;
        params.intensity_range = self.intensity_range;
        params.sensed_intensity_scale = self.sensed_intensity_scale;
        params.background_noise = self.background_noise;
        params.field_scale_range = self.field_scale_range;
        params.distractors_per_scene = self.distractors_per_scene;
        params.rgbd = self.rgbd.as_ref().map(|r| RgbdParams {
            intrinsics: r.intrinsics,
            depth_range: r.depth_range,
            background_depth: r.background_depth,
            class_dims: r.class_dims.clone(),
        });
        params
    }
}

/// Training configuration file. A missing `model` section falls back to the
/// stock small architecture over `classes` (or the classes found in the
/// dataset annotations).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainConfig {
    pub schema_version: Option<u32>,
    pub classes: Option<Vec<String>>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainOptions>,
    pub init_seed: Option<u64>,
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("cannot parse config {}", path.display()))
}

/// Write the fully resolved configuration of a run, with the tool version,
/// next to the run outputs.
pub fn write_resolved<T: Serialize>(out_dir: &Path, command: &str, resolved: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved<'a, T> {
        tool_version: &'a str,
        command: &'a str,
        config: &'a T,
    }
    let doc = Resolved {
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        config: resolved,
    };
    let path = out_dir.join("resolved_config.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)?)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
