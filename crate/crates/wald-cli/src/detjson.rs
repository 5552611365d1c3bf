//! JSON interchange format for detections, so externally produced results
//! can be scored by `wald eval --detections`.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use wald::box3d::Box3D;
use wald::detector::DetectionResult;
use wald::geometry::Box2D;
use wald::paired::ScenePair;

#[derive(Serialize, Deserialize)]
pub struct DetectionsDoc {
    pub schema_version: u32,
    pub scenes: Vec<SceneDetections>,
}

#[derive(Serialize, Deserialize)]
pub struct SceneDetections {
    pub scene_id: String,
    pub detections: Vec<DetectionDoc>,
}

#[derive(Serialize, Deserialize)]
pub struct DetectionDoc {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub class_label: String,
    pub confidence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box3d: Option<Box3D>,
}

impl From<&DetectionResult> for DetectionDoc {
    fn from(d: &DetectionResult) -> Self {
        let (x0, y0, x1, y1) = d.bbox.corners();
        DetectionDoc {
            x0,
            y0,
            x1,
            y1,
            class_label: d.class_label.clone(),
            confidence: d.confidence,
            box3d: d.box3d,
        }
    }
}

/// Load per-scene detections, aligned with `scenes` by scene_id.
pub fn load_detections(path: &Path, scenes: &[ScenePair]) -> Result<Vec<Vec<DetectionResult>>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read detections {}", path.display()))?;
    let doc: DetectionsDoc = serde_json::from_str(&text)?;
    anyhow::ensure!(
        doc.schema_version == 1,
        "unsupported detections schema version {}",
        doc.schema_version
    );
    let mut by_id: std::collections::BTreeMap<&str, &SceneDetections> =
        doc.scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let entry = by_id.remove(scene.scene_id.as_str());
        let dets = match entry {
            Some(e) => e
                .detections
                .iter()
                .map(|d| {
                    Ok(DetectionResult {
                        bbox: Box2D::from_corners(d.x0, d.y0, d.x1, d.y1)
                            .map_err(|e| anyhow::anyhow!("bad detection box: {e}"))?,
                        class_label: d.class_label.clone(),
                        confidence: d.confidence,
                        box3d: d.box3d,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        out.push(dets);
    }
    Ok(out)
}
