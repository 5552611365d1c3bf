//! End-to-end inference: feature extraction, fused proposals, aligned and
//! fused per-RoI heads, and the final filtered detection set in
//! reference-image coordinates.

use crate::box3d::{decode_3d, init_box3d, Box3DTargets};
use crate::geometry::Box2D;
use crate::paired::{crop_values, ScenePair};

use super::heads::forward_roi;
use super::rpn::propose_regions;
use super::{
    clip_box, decode_box_deltas, nms, DetectionResult, DetectorModel, FeatureMap, ModelError,
    Proposal,
};

/// Run both backbone streams on a scene. The sensed image is scaled by the
/// configured input normalization (e.g. inverse depth range for RGB-D).
pub fn extract_features(
    scene: &ScenePair,
    model: &DetectorModel,
) -> Result<(FeatureMap, FeatureMap), ModelError> {
    let cfg = &model.config;
    if scene.extent != cfg.input {
        return Err(ModelError::InputSize {
            got_w: scene.extent.width,
            got_h: scene.extent.height,
            want_w: cfg.input.width,
            want_h: cfg.input.height,
        });
    }
    let stride = super::ModelConfig::STRIDE;
    let x_ref = super::StreamParams::prepare_input(&scene.ref_image, 1.0);
    let x_sensed = super::StreamParams::prepare_input(&scene.sensed_image, cfg.sensed_scale);
    let f_ref = FeatureMap { values: model.params.stream_ref.forward(&x_ref), stride };
    let f_sensed = FeatureMap { values: model.params.stream_sensed.forward(&x_sensed), stride };
    Ok((f_ref, f_sensed))
}

/// Counters produced by a detection pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectStats {
    /// Proposals dropped because their region held no valid depth.
    pub dropped_no_depth: usize,
}

impl DetectorModel {
    /// Fused-RPN proposals for a pair of feature maps.
    pub fn propose(
        &self,
        f_ref: &FeatureMap,
        f_sensed: &FeatureMap,
        top_k: usize,
    ) -> Result<Vec<Proposal>, ModelError> {
        propose_regions(
            f_ref,
            f_sensed,
            &self.params.rpn,
            &self.config.anchor_sizes,
            self.config.input,
            self.config.rpn_nms_iou,
            top_k,
        )
    }
}

/// Full detection pipeline with counters; see [`detect`].
pub fn detect_with_stats(
    scene: &ScenePair,
    model: &DetectorModel,
    threshold: f64,
) -> Result<(Vec<DetectionResult>, DetectStats), ModelError> {
    let cfg = &model.config;
    let (f_ref, f_sensed) = extract_features(scene, model)?;
    let proposals = model.propose(&f_ref, &f_sensed, cfg.proposal_count)?;
    let mut stats = DetectStats::default();

    struct Candidate {
        bbox: Box2D,
        class_index: usize,
        confidence: f64,
        box3d: Option<crate::box3d::Box3D>,
    }

    let mut candidates: Vec<Candidate> = Vec::with_capacity(proposals.len());
    for p in &proposals {
        let fwd = forward_roi(&model.params, cfg, &f_ref, &f_sensed, &p.roi, &p.roi)?;
        // best foreground class
        let (mut best_c, mut best_p) = (1usize, fwd.cls_probs[1]);
        for c in 2..cfg.n_classes_with_bg() {
            if fwd.cls_probs[c] > best_p {
                best_c = c;
                best_p = fwd.cls_probs[c];
            }
        }
        let bbox = clip_box(&decode_box_deltas(&p.roi, &fwd.reg), cfg.input);
        let box3d = if cfg.with_3d {
            let Some(intr) = &scene.intrinsics else {
                return Err(ModelError::Config(
                    "3-D head requires scene camera intrinsics".into(),
                ));
            };
            let label = &cfg.classes[best_c - 1];
            let patch = crop_values(&scene.sensed_image, &fwd.aligned_roi);
            match init_box3d(&p.roi, &patch, intr, &cfg.class_dims, label) {
                Ok(init) => {
                    let v = fwd.v3d.expect("with_3d model has a 3-D head");
                    Some(decode_3d(&init, &Box3DTargets::from_array(v)))
                }
                Err(crate::box3d::Box3dError::NoValidDepth) => {
                    stats.dropped_no_depth += 1;
                    continue;
                }
                Err(e) => return Err(ModelError::Config(e.to_string())),
            }
        } else {
            None
        };
        candidates.push(Candidate { bbox, class_index: best_c, confidence: best_p, box3d });
    }

    // per-class NMS, then the confidence filter
    let mut results: Vec<DetectionResult> = Vec::new();
    for c in 1..cfg.n_classes_with_bg() {
        let class_items: Vec<usize> = (0..candidates.len())
            .filter(|&i| candidates[i].class_index == c)
            .collect();
        let boxes: Vec<(Box2D, f64)> = class_items
            .iter()
            .map(|&i| (candidates[i].bbox, candidates[i].confidence))
            .collect();
        for k in nms(&boxes, cfg.nms_iou) {
            let cand = &candidates[class_items[k]];
            if cand.confidence > threshold {
                results.push(DetectionResult {
                    bbox: cand.bbox,
                    class_label: cfg.classes[c - 1].clone(),
                    confidence: cand.confidence,
                    box3d: cand.box3d,
                });
            }
        }
    }
    results.sort_by(|a, b| {
        b.confidence.partial_cmp(&a.confidence).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok((results, stats))
}

/// Detect objects in a scene: everything above the confidence threshold
/// after per-class NMS, in reference-image coordinates.
pub fn detect(
    scene: &ScenePair,
    model: &DetectorModel,
    threshold: f64,
) -> Result<Vec<DetectionResult>, ModelError> {
    detect_with_stats(scene, model, threshold).map(|(d, _)| d)
}
