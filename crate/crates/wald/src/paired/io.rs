//! Annotation and dataset persistence.
//!
//! Annotations are one JSON document per dataset (scenes, then objects, with
//! boxes in corner form under explicit `ref` / `sensed` keys). Image arrays
//! go to raw little-endian f64 files, one per scene, with a versioned
//! header. Both formats carry a schema version.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::box3d::{Box3D, CameraIntrinsics};
use crate::geometry::{Box2D, Extent};

use super::{DataError, Occlusion, PairedObject, ScenePair, ShiftField};

pub const ANNOTATION_SCHEMA_VERSION: u32 = 1;
const IMAGE_MAGIC: &[u8; 8] = b"WALDIMG\0";
const IMAGE_FORMAT_VERSION: u32 = 1;

/// Scene metadata: everything in a [`ScenePair`] except the pixel arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotations {
    pub scene_id: String,
    pub extent: Extent,
    pub image_file: Option<String>,
    pub objects: Vec<PairedObject>,
    pub shift_field: Option<ShiftField>,
    pub intrinsics: Option<CameraIntrinsics>,
}

impl ScenePair {
    /// Metadata view of this scene, pointing at `image_file` for pixels.
    pub fn annotations(&self, image_file: Option<String>) -> SceneAnnotations {
        SceneAnnotations {
            scene_id: self.scene_id.clone(),
            extent: self.extent,
            image_file,
            objects: self.objects.clone(),
            shift_field: self.shift_field,
            intrinsics: self.intrinsics,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationsDoc {
    schema_version: u32,
    scenes: Vec<SceneDoc>,
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    scene_id: String,
    width: usize,
    height: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    intrinsics: Option<CameraIntrinsics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shift_field: Option<ShiftField>,
    objects: Vec<ObjectDoc>,
}

#[derive(Serialize, Deserialize)]
struct ObjectDoc {
    pair_id: u32,
    class_label: String,
    #[serde(default)]
    unpaired: bool,
    #[serde(default)]
    occlusion: Occlusion,
    #[serde(default)]
    truncated: bool,
    #[serde(rename = "ref", skip_serializing_if = "Option::is_none")]
    ref_box: Option<CornerBox>,
    #[serde(rename = "sensed", skip_serializing_if = "Option::is_none")]
    sensed_box: Option<CornerBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth_patch: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    box3d: Option<Box3D>,
}

#[derive(Serialize, Deserialize)]
struct CornerBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl From<&Box2D> for CornerBox {
    fn from(b: &Box2D) -> Self {
        let (x0, y0, x1, y1) = b.corners();
        CornerBox { x0, y0, x1, y1 }
    }
}

impl CornerBox {
    fn to_box(&self, scene_id: &str, field: &str) -> Result<Box2D, DataError> {
        Box2D::from_corners(self.x0, self.y0, self.x1, self.y1).map_err(|e| {
            DataError::Annotation {
                scene_id: scene_id.to_string(),
                field: field.to_string(),
                message: e.to_string(),
            }
        })
    }
}

/// Write scene metadata for a dataset as one JSON document.
pub fn save_annotations(scenes: &[SceneAnnotations], path: &Path) -> Result<(), DataError> {
    let doc = AnnotationsDoc {
        schema_version: ANNOTATION_SCHEMA_VERSION,
        scenes: scenes
            .iter()
            .map(|s| SceneDoc {
                scene_id: s.scene_id.clone(),
                width: s.extent.width,
                height: s.extent.height,
                image_file: s.image_file.clone(),
                intrinsics: s.intrinsics,
                shift_field: s.shift_field,
                objects: s
                    .objects
                    .iter()
                    .map(|o| ObjectDoc {
                        pair_id: o.pair_id,
                        class_label: o.class_label.clone(),
                        unpaired: o.unpaired,
                        occlusion: o.occlusion,
                        truncated: o.truncated,
                        ref_box: o.ref_box.as_ref().map(CornerBox::from),
                        sensed_box: o.sensed_box.as_ref().map(CornerBox::from),
                        depth_patch: o.depth_patch.clone(),
                        box3d: o.box3d,
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&doc)?;
    fs::write(path, json)?;
    Ok(())
}

/// Load and validate scene metadata from an annotations document.
pub fn load_annotations(path: &Path) -> Result<Vec<SceneAnnotations>, DataError> {
    let text = fs::read_to_string(path)?;
    let doc: AnnotationsDoc = serde_json::from_str(&text)?;
    if doc.schema_version != ANNOTATION_SCHEMA_VERSION {
        return Err(DataError::SchemaVersion {
            found: doc.schema_version,
            expected: ANNOTATION_SCHEMA_VERSION,
        });
    }
    let mut out = Vec::with_capacity(doc.scenes.len());
    for s in doc.scenes {
        let extent = Extent::new(s.width, s.height);
        let mut objects = Vec::with_capacity(s.objects.len());
        for o in s.objects {
            let obj = PairedObject {
                pair_id: o.pair_id,
                class_label: o.class_label,
                ref_box: o
                    .ref_box
                    .as_ref()
                    .map(|c| c.to_box(&s.scene_id, "ref"))
                    .transpose()?,
                sensed_box: o
                    .sensed_box
                    .as_ref()
                    .map(|c| c.to_box(&s.scene_id, "sensed"))
                    .transpose()?,
                unpaired: o.unpaired,
                occlusion: o.occlusion,
                truncated: o.truncated,
                depth_patch: o.depth_patch,
                box3d: o.box3d,
            };
            obj.validate(&s.scene_id, extent)?;
            objects.push(obj);
        }
        let mut ids = std::collections::BTreeSet::new();
        for o in &objects {
            if !ids.insert(o.pair_id) {
                return Err(DataError::Annotation {
                    scene_id: s.scene_id.clone(),
                    field: "pair_id".into(),
                    message: format!("duplicate pair_id {}", o.pair_id),
                });
            }
        }
        out.push(SceneAnnotations {
            scene_id: s.scene_id,
            extent,
            image_file: s.image_file,
            objects,
            shift_field: s.shift_field,
            intrinsics: s.intrinsics,
        });
    }
    Ok(out)
}

/// Write both image arrays of a scene as raw little-endian f64.
pub fn write_scene_images(scene: &ScenePair, path: &Path) -> Result<(), DataError> {
    let mut f = fs::File::create(path)?;
    f.write_all(IMAGE_MAGIC)?;
    f.write_all(&IMAGE_FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(scene.extent.width as u32).to_le_bytes())?;
    f.write_all(&(scene.extent.height as u32).to_le_bytes())?;
    for arr in [&scene.ref_image, &scene.sensed_image] {
        for v in arr.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read back the two image arrays written by [`write_scene_images`].
pub fn read_scene_images(path: &Path) -> Result<(Array2<f64>, Array2<f64>), DataError> {
    let bad = |m: &str| DataError::ImageFormat {
        path: path.display().to_string(),
        message: m.to_string(),
    };
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != IMAGE_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != IMAGE_FORMAT_VERSION {
        return Err(bad(&format!("unsupported image format version {version}")));
    }
    f.read_exact(&mut u32buf)?;
    let width = u32::from_le_bytes(u32buf) as usize;
    f.read_exact(&mut u32buf)?;
    let height = u32::from_le_bytes(u32buf) as usize;
    let mut read_plane = || -> Result<Array2<f64>, DataError> {
        let mut bytes = vec![0u8; width * height * 8];
        f.read_exact(&mut bytes).map_err(|_| bad("truncated pixel data"))?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((height, width), vals).map_err(|_| bad("shape mismatch"))
    };
    let ref_image = read_plane()?;
    let sensed_image = read_plane()?;
    Ok((ref_image, sensed_image))
}

/// Persist a whole dataset under `dir`: `annotations.json` plus
/// `scenes/<scene_id>.bin` image files.
pub fn save_dataset(scenes: &[ScenePair], dir: &Path) -> Result<(), DataError> {
    let scene_dir = dir.join("scenes");
    fs::create_dir_all(&scene_dir)?;
    let mut metas = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let rel = format!("scenes/{}.bin", scene.scene_id);
        write_scene_images(scene, &dir.join(&rel))?;
        metas.push(scene.annotations(Some(rel)));
    }
    save_annotations(&metas, &dir.join("annotations.json"))
}

/// Load a dataset saved by [`save_dataset`], validating every scene.
pub fn load_dataset(dir: &Path) -> Result<Vec<ScenePair>, DataError> {
    let metas = load_annotations(&dir.join("annotations.json"))?;
    let mut scenes = Vec::with_capacity(metas.len());
    for meta in metas {
        let rel = meta.image_file.clone().ok_or_else(|| DataError::Annotation {
            scene_id: meta.scene_id.clone(),
            field: "image_file".into(),
            message: "scene has no image file".into(),
        })?;
        let path: PathBuf = dir.join(rel);
        let (ref_image, sensed_image) = read_scene_images(&path)?;
        let scene = ScenePair {
            scene_id: meta.scene_id,
            extent: meta.extent,
            ref_image,
            sensed_image,
            objects: meta.objects,
            shift_field: meta.shift_field,
            intrinsics: meta.intrinsics,
        };
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paired::{generate_scene_with, GeneratorParams, ShiftFieldConfig};

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("wald_io_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn sample_scenes() -> Vec<ScenePair> {
        let mut params =
            GeneratorParams::new(ShiftFieldConfig::aligned(), Extent::new(64, 64));
        params.shift.base_shift = 2.5;
        params.shift.noise_sigma = 0.5;
        params.shift.unpaired_rate = 0.4;
        (0..3)
            .map(|i| generate_scene_with(&params, 3, i, &format!("scene_{i:05}")).unwrap())
            .collect()
    }

    #[test]
    fn dataset_round_trip_is_identity() {
        let dir = tmpdir("roundtrip");
        let scenes = sample_scenes();
        save_dataset(&scenes, &dir).unwrap();
        let back = load_dataset(&dir).unwrap();
        assert_eq!(scenes, back);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn annotations_round_trip_is_identity() {
        let dir = tmpdir("ann");
        let metas: Vec<SceneAnnotations> =
            sample_scenes().iter().map(|s| s.annotations(None)).collect();
        let path = dir.join("annotations.json");
        save_annotations(&metas, &path).unwrap();
        let back = load_annotations(&path).unwrap();
        assert_eq!(metas, back);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn unpaired_with_two_boxes_is_rejected() {
        let dir = tmpdir("badunpaired");
        let path = dir.join("annotations.json");
        fs::write(
            &path,
            r#"{"schema_version":1,"scenes":[{"scene_id":"s9","width":64,"height":64,
                "objects":[{"pair_id":0,"class_label":"disc","unpaired":true,
                "ref":{"x0":1,"y0":1,"x1":9,"y1":9},
                "sensed":{"x0":2,"y0":1,"x1":10,"y1":9}}]}]}"#,
        )
        .unwrap();
        let err = load_annotations(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s9") && msg.contains("unpaired"), "{msg}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_pair_id_is_rejected_with_field_name() {
        let dir = tmpdir("badpairid");
        let path = dir.join("annotations.json");
        fs::write(
            &path,
            r#"{"schema_version":1,"scenes":[{"scene_id":"s0","width":64,"height":64,
                "objects":[{"class_label":"disc","ref":{"x0":1,"y0":1,"x1":9,"y1":9},
                "sensed":{"x0":1,"y0":1,"x1":9,"y1":9}}]}]}"#,
        )
        .unwrap();
        let err = load_annotations(&path).unwrap_err();
        assert!(err.to_string().contains("pair_id"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let dir = tmpdir("badschema");
        let path = dir.join("annotations.json");
        fs::write(&path, r#"{"schema_version":99,"scenes":[]}"#).unwrap();
        assert!(matches!(
            load_annotations(&path),
            Err(DataError::SchemaVersion { found: 99, .. })
        ));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn save_is_byte_identical_across_runs() {
        let dir = tmpdir("determinism");
        let scenes = sample_scenes();
        save_dataset(&scenes, &dir).unwrap();
        let first = fs::read(dir.join("annotations.json")).unwrap();
        let first_img = fs::read(dir.join("scenes/scene_00000.bin")).unwrap();
        save_dataset(&scenes, &dir).unwrap();
        assert_eq!(first, fs::read(dir.join("annotations.json")).unwrap());
        assert_eq!(first_img, fs::read(dir.join("scenes/scene_00000.bin")).unwrap());
        fs::remove_dir_all(&dir).unwrap();
    }
}
