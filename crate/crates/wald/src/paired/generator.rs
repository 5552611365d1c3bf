//! Synthetic weakly-aligned scene generation.
//!
//! Objects are high-contrast geometric glyphs with a deliberate appearance
//! difference between modalities (filled in the reference image, outlined in
//! the sensed image) so that a detector cannot solve the task from one
//! modality alone. Sensed boxes are the reference boxes displaced by a
//! smooth per-scene shift field plus per-object Gaussian noise; the field is
//! recorded in the scene as ground truth.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::box3d::{Box3D, CameraIntrinsics, ClassDims};
use crate::geometry::{Box2D, Extent};

use super::{DataError, Occlusion, PairedObject, ScenePair, ShiftField, ShiftFieldConfig};

/// Full generator configuration. [`generate_scene`] uses the defaults for
/// everything except the shift field.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub shift: ShiftFieldConfig,
    pub canvas: Extent,
    /// Class labels; the glyph shape cycles disc / square / cross by index.
    pub classes: Vec<String>,
    /// Glyph side length range, pixels.
    pub size_range: (f64, f64),
    /// Glyph intensity range.
    pub intensity_range: (f64, f64),
    /// Extra per-object attenuation of the sensed-side glyph, mimicking
    /// modality-quality variation (e.g. illumination).
    pub sensed_intensity_scale: (f64, f64),
    /// Uniform background noise amplitude.
    pub background_noise: f64,
    /// Maximum IoU allowed between placed reference boxes.
    pub max_overlap: f64,
    /// Per-scene multiplier range on the shift field's base magnitude, so
    /// scenes span a mix of mild and strong misalignment.
    pub field_scale_range: (f64, f64),
    /// Unannotated clutter glyphs per scene, rendered in the reference
    /// modality only. They are indistinguishable from objects without the
    /// sensed modality, so a detector must genuinely fuse to reject them.
    pub distractors_per_scene: (usize, usize),
    /// When set, the sensed modality is a metric depth image and objects
    /// carry ground-truth 3-D boxes and depth patches.
    pub rgbd: Option<RgbdParams>,
}

#[derive(Debug, Clone)]
pub struct RgbdParams {
    pub intrinsics: CameraIntrinsics,
    /// Object depth sampling range, meters.
    pub depth_range: (f64, f64),
    /// Depth value of empty space, meters.
    pub background_depth: f64,
    pub class_dims: ClassDims,
}

impl GeneratorParams {
    pub fn new(shift: ShiftFieldConfig, canvas: Extent) -> Self {
        GeneratorParams {
            shift,
            canvas,
            classes: vec!["disc".to_string()],
            size_range: (7.0, 17.0),
            intensity_range: (0.5, 0.95),
            sensed_intensity_scale: (0.45, 1.0),
            background_noise: 0.05,
            max_overlap: 0.2,
            field_scale_range: (0.4, 1.0),
            distractors_per_scene: (3, 5),
            rgbd: None,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.shift.validate()?;
        if self.canvas.width == 0 || self.canvas.height == 0 {
            return Err(DataError::Generation("canvas must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(DataError::Generation("at least one class label required".into()));
        }
        if !(self.size_range.0 > 0.0 && self.size_range.1 >= self.size_range.0) {
            return Err(DataError::Generation("invalid glyph size range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Glyph {
    Disc,
    Square,
    Cross,
}

impl Glyph {
    fn for_class(index: usize) -> Glyph {
        match index % 3 {
            0 => Glyph::Disc,
            1 => Glyph::Square,
            _ => Glyph::Cross,
        }
    }

    /// Signed distance to the glyph boundary, negative inside, for a point
    /// offset `(dx, dy)` from the glyph center with half-extents `(hw, hh)`.
    fn sdf(&self, dx: f64, dy: f64, hw: f64, hh: f64) -> f64 {
        match self {
            Glyph::Disc => {
                // ellipse approximation via normalized radius
                let r = ((dx / hw).powi(2) + (dy / hh).powi(2)).sqrt();
                (r - 1.0) * hw.min(hh)
            }
            Glyph::Square => (dx.abs() - hw).max(dy.abs() - hh),
            Glyph::Cross => {
                let bar = hw.min(hh) * 0.35;
                let horiz = (dx.abs() - hw).max(dy.abs() - bar);
                let vert = (dx.abs() - bar).max(dy.abs() - hh);
                horiz.min(vert)
            }
        }
    }
}

fn coverage(sdf: f64) -> f64 {
    (0.5 - sdf).clamp(0.0, 1.0)
}

/// Snap a coordinate to a 2^-20 px grid. On this dyadic grid (for the
/// coordinate magnitudes a scene can hold) the corner-form <-> center-form
/// conversions are exact, which makes annotation round-trips lossless.
fn snap(v: f64) -> f64 {
    const GRID: f64 = (1u64 << 20) as f64;
    (v * GRID).round() / GRID
}

fn snap_box(b: &Box2D) -> Box2D {
    Box2D { x: snap(b.x), y: snap(b.y), w: snap(b.w), h: snap(b.h) }
}

fn render_filled(img: &mut Array2<f64>, glyph: Glyph, b: &Box2D, value: f64) {
    stamp(img, b, |dx, dy, hw, hh| coverage(glyph.sdf(dx, dy, hw, hh)) * value);
}

fn render_outline(img: &mut Array2<f64>, glyph: Glyph, b: &Box2D, value: f64) {
    const THICKNESS: f64 = 2.0;
    stamp(img, b, |dx, dy, hw, hh| {
        let sdf = glyph.sdf(dx, dy, hw, hh);
        let band = (sdf + THICKNESS / 2.0).abs() - THICKNESS / 2.0;
        coverage(band) * value
    });
}

/// Write `max(existing, f(offset))` over the integer pixels under the box.
fn stamp<F: Fn(f64, f64, f64, f64) -> f64>(img: &mut Array2<f64>, b: &Box2D, f: F) {
    let (h, w) = img.dim();
    let (x0, y0, x1, y1) = b.corners();
    let ix0 = (x0.floor().max(0.0)) as usize;
    let iy0 = (y0.floor().max(0.0)) as usize;
    let ix1 = (x1.ceil().min(w as f64)) as usize;
    let iy1 = (y1.ceil().min(h as f64)) as usize;
    let (hw, hh) = (b.w / 2.0, b.h / 2.0);
    for py in iy0..iy1 {
        for px in ix0..ix1 {
            let dx = (px as f64 + 0.5) - b.x;
            let dy = (py as f64 + 0.5) - b.y;
            let v = f(dx, dy, hw, hh);
            if v > img[(py, px)] {
                img[(py, px)] = v;
            }
        }
    }
}

/// Generate one synthetic scene with default object appearance. Deterministic
/// for a fixed seed.
pub fn generate_scene(
    config: &ShiftFieldConfig,
    canvas: Extent,
    n_objects: usize,
    seed: u64,
) -> Result<ScenePair, DataError> {
    generate_scene_with(
        &GeneratorParams::new(*config, canvas),
        n_objects,
        seed,
        &format!("scene_{seed:08}"),
    )
}

/// Generate one synthetic scene with full control over appearance.
pub fn generate_scene_with(
    params: &GeneratorParams,
    n_objects: usize,
    seed: u64,
    scene_id: &str,
) -> Result<ScenePair, DataError> {
    params.validate()?;
    let canvas = params.canvas;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let field_scale =
        rng.gen_range(params.field_scale_range.0..=params.field_scale_range.1);
    let field = ShiftField {
        direction: (angle.cos(), angle.sin()),
        base_shift: params.shift.base_shift * field_scale,
        edge_gain: params.shift.edge_gain,
        smoothness_scale: params.shift.smoothness_scale,
        canvas,
    };

    // place reference boxes with overlap rejection
    let mut placed: Vec<(usize, Box2D)> = Vec::with_capacity(n_objects);
    let mut depth_of_placed: Vec<f64> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut accepted = None;
        for _attempt in 0..200 {
            let (class_idx, bw, bh, z) = match &params.rgbd {
                None => {
                    let class_idx = rng.gen_range(0..params.classes.len());
                    let bw = rng.gen_range(params.size_range.0..=params.size_range.1);
                    let bh = bw * rng.gen_range(0.9..1.1);
                    (class_idx, bw, bh, 0.0)
                }
                Some(rgbd) => {
                    let class_idx = rng.gen_range(0..params.classes.len());
                    let label = &params.classes[class_idx];
                    let dims = rgbd.class_dims.get(label).ok_or_else(|| {
                        DataError::Generation(format!("no class dims for {label:?}"))
                    })?;
                    let z = rng.gen_range(rgbd.depth_range.0..=rgbd.depth_range.1);
                    let f = rgbd.intrinsics.f;
                    (class_idx, f * dims[0] / z, f * dims[2] / z, z)
                }
            };
            let margin = 1.0;
            let x_lo = bw / 2.0 + margin;
            let x_hi = canvas.width as f64 - bw / 2.0 - margin;
            let y_lo = bh / 2.0 + margin;
            let y_hi = canvas.height as f64 - bh / 2.0 - margin;
            if x_lo >= x_hi || y_lo >= y_hi {
                return Err(DataError::Generation(format!(
                    "canvas {}x{} too small for a {bw:.0}x{bh:.0} object",
                    canvas.width, canvas.height
                )));
            }
            let cand = snap_box(
                &Box2D::new(rng.gen_range(x_lo..x_hi), rng.gen_range(y_lo..y_hi), bw, bh)
                    .expect("positive glyph size"),
            );
            if placed.iter().all(|(_, b)| b.iou(&cand) <= params.max_overlap) {
                accepted = Some((class_idx, cand, z));
                break;
            }
        }
        let Some((class_idx, cand, z)) = accepted else {
            return Err(DataError::Generation(format!(
                "could not place {n_objects} objects on a {}x{} canvas",
                canvas.width, canvas.height
            )));
        };
        placed.push((class_idx, cand));
        depth_of_placed.push(z);
    }

    // reference-only clutter, placed with the same overlap rejection
    let n_distractors =
        rng.gen_range(params.distractors_per_scene.0..=params.distractors_per_scene.1);
    let mut distractors: Vec<(usize, Box2D, f64)> = Vec::with_capacity(n_distractors);
    for _ in 0..n_distractors {
        for _attempt in 0..200 {
            let class_idx = rng.gen_range(0..params.classes.len());
            let bw = rng.gen_range(params.size_range.0..=params.size_range.1);
            let bh = bw * rng.gen_range(0.9..1.1);
            let margin = 1.0;
            let (x_lo, x_hi) = (bw / 2.0 + margin, canvas.width as f64 - bw / 2.0 - margin);
            let (y_lo, y_hi) = (bh / 2.0 + margin, canvas.height as f64 - bh / 2.0 - margin);
            if x_lo >= x_hi || y_lo >= y_hi {
                break;
            }
            let cand = snap_box(
                &Box2D::new(rng.gen_range(x_lo..x_hi), rng.gen_range(y_lo..y_hi), bw, bh)
                    .expect("positive glyph size"),
            );
            let clear = placed.iter().all(|(_, b)| b.iou(&cand) <= params.max_overlap)
                && distractors.iter().all(|(_, b, _)| b.iou(&cand) <= params.max_overlap);
            if clear {
                let intensity =
                    rng.gen_range(params.intensity_range.0..=params.intensity_range.1);
                distractors.push((class_idx, cand, intensity));
                break;
            }
        }
        // a crowded canvas silently gets fewer distractors; they are
        // unannotated clutter, not part of the contract
    }

    let mut objects: Vec<(PairedObject, usize, f64, f64)> = Vec::with_capacity(n_objects);
    for (i, (class_idx, ref_box)) in placed.iter().enumerate() {
        let (fx, fy) = field.displacement_at(ref_box.x, ref_box.y);
        let nx = params.shift.noise_sigma * std_normal.sample(&mut rng);
        let ny = params.shift.noise_sigma * std_normal.sample(&mut rng);
        let sensed_box = snap_box(&ref_box.translated(fx + nx, fy + ny));
        // unpaired objects exist in the sensed modality only; a glyph that
        // appears in the reference image alone is always clutter
        let unpaired = rng.gen::<f64>() < params.shift.unpaired_rate;
        let intensity =
            rng.gen_range(params.intensity_range.0..=params.intensity_range.1);
        let sensed_intensity = intensity
            * rng.gen_range(params.sensed_intensity_scale.0..=params.sensed_intensity_scale.1);

        let truncated = if unpaired {
            !canvas.contains(&sensed_box)
        } else {
            !canvas.contains(ref_box) || !canvas.contains(&sensed_box)
        };
        let box3d = params.rgbd.as_ref().map(|rgbd| {
            let z = depth_of_placed[i];
            let dims = rgbd.class_dims[&params.classes[*class_idx]];
            Box3D {
                x_cam: z * (ref_box.x - rgbd.intrinsics.o_x) / rgbd.intrinsics.f,
                y_cam: z * (ref_box.y - rgbd.intrinsics.o_y) / rgbd.intrinsics.f,
                z_cam: z,
                l: dims[0],
                w: dims[1],
                h: dims[2],
                theta: 0.0,
            }
        });
        objects.push((
            PairedObject {
                pair_id: i as u32,
                class_label: params.classes[*class_idx].clone(),
                ref_box: if unpaired { None } else { Some(*ref_box) },
                sensed_box: Some(sensed_box),
                unpaired,
                occlusion: Occlusion::None,
                truncated,
                depth_patch: None,
                box3d,
            },
            *class_idx,
            intensity,
            sensed_intensity,
        ));
    }

    // render
    let (w, h) = (canvas.width, canvas.height);
    let mut ref_image =
        Array2::from_shape_fn((h, w), |_| rng.gen::<f64>() * params.background_noise);
    let mut sensed_image = match &params.rgbd {
        None => Array2::from_shape_fn((h, w), |_| rng.gen::<f64>() * params.background_noise),
        Some(rgbd) => Array2::from_elem((h, w), rgbd.background_depth),
    };
    for (obj, class_idx, intensity, _) in &objects {
        if let Some(b) = &obj.ref_box {
            render_filled(&mut ref_image, Glyph::for_class(*class_idx), b, *intensity);
        }
    }
    for (class_idx, b, intensity) in &distractors {
        render_filled(&mut ref_image, Glyph::for_class(*class_idx), b, *intensity);
    }
    if params.rgbd.is_none() {
        for (obj, class_idx, _, sensed_intensity) in &objects {
            if let Some(b) = &obj.sensed_box {
                render_outline(
                    &mut sensed_image,
                    Glyph::for_class(*class_idx),
                    b,
                    *sensed_intensity,
                );
            }
        }
    } else {
        // depth: nearer objects occlude, so stamp far-to-near
        let mut order: Vec<usize> = (0..objects.len()).collect();
        order.sort_by(|&a, &b| {
            let za = objects[a].0.box3d.map(|v| v.z_cam).unwrap_or(0.0);
            let zb = objects[b].0.box3d.map(|v| v.z_cam).unwrap_or(0.0);
            zb.partial_cmp(&za).unwrap().then(a.cmp(&b))
        });
        for i in order {
            let (obj, class_idx, _, _) = &objects[i];
            if let (Some(b), Some(b3)) = (&obj.sensed_box, &obj.box3d) {
                stamp_depth(&mut sensed_image, Glyph::for_class(*class_idx), b, b3.z_cam);
            }
        }
    }

    let mut objects: Vec<PairedObject> = objects.into_iter().map(|(o, _, _, _)| o).collect();
    // extract per-object depth patches once the full depth image exists
    if params.rgbd.is_some() {
        for obj in &mut objects {
            if let Some(b) = &obj.sensed_box {
                obj.depth_patch = Some(crop_values(&sensed_image, b));
            }
        }
    }

    let scene = ScenePair {
        scene_id: scene_id.to_string(),
        extent: canvas,
        ref_image,
        sensed_image,
        objects,
        shift_field: Some(field),
        intrinsics: params.rgbd.as_ref().map(|r| r.intrinsics),
    };
    scene.validate()?;
    Ok(scene)
}

fn stamp_depth(img: &mut Array2<f64>, glyph: Glyph, b: &Box2D, z: f64) {
    let (h, w) = img.dim();
    let (x0, y0, x1, y1) = b.corners();
    let ix0 = (x0.floor().max(0.0)) as usize;
    let iy0 = (y0.floor().max(0.0)) as usize;
    let ix1 = (x1.ceil().min(w as f64)) as usize;
    let iy1 = (y1.ceil().min(h as f64)) as usize;
    for py in iy0..iy1 {
        for px in ix0..ix1 {
            let dx = (px as f64 + 0.5) - b.x;
            let dy = (py as f64 + 0.5) - b.y;
            if glyph.sdf(dx, dy, b.w / 2.0, b.h / 2.0) < 0.0 {
                img[(py, px)] = z;
            }
        }
    }
}

/// Values of the integer pixels under a box, clipped to the image.
pub fn crop_values(img: &Array2<f64>, b: &Box2D) -> Vec<f64> {
    let (h, w) = img.dim();
    let (x0, y0, x1, y1) = b.corners();
    let ix0 = (x0.floor().max(0.0)) as usize;
    let iy0 = (y0.floor().max(0.0)) as usize;
    let ix1 = (x1.ceil().min(w as f64)) as usize;
    let iy1 = (y1.ceil().min(h as f64)) as usize;
    let mut out = Vec::new();
    for py in iy0..iy1 {
        for px in ix0..ix1 {
            out.push(img[(py, px)]);
        }
    }
    out
}

/// Derive a per-scene seed from a master seed and scene index (splitmix64).
pub fn scene_seed(master_seed: u64, index: usize) -> u64 {
    let mut z = master_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate a dataset of scenes; scene `i` uses an independent seed derived
/// from the master seed, so the result is identical for any worker count.
pub fn generate_dataset(
    params: &GeneratorParams,
    n_scenes: usize,
    objects_per_scene: (usize, usize),
    master_seed: u64,
    workers: usize,
) -> Result<Vec<ScenePair>, DataError> {
    params.validate()?;
    let results = crate::par::map_indexed(n_scenes, workers, |i| {
        let seed = scene_seed(master_seed, i);
        let mut count_rng = ChaCha20Rng::seed_from_u64(seed ^ 0xC0FF_EE);
        let n = count_rng.gen_range(objects_per_scene.0..=objects_per_scene.1);
        generate_scene_with(params, n, seed, &format!("scene_{i:05}"))
    });
    results.into_iter().collect()
}
