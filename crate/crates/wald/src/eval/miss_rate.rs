//! Log-average miss rate over FPPI, with the "reasonable" ground-truth
//! filter and the paired-annotation modality variants.
//!
//! Matching is greedy in descending confidence at a fixed IoU threshold.
//! Ignored ground truth (filtered out by the reasonable rule, or boxes an
//! object only has in the other modality) neither counts as a miss nor
//! turns a matching detection into a false positive.

use crate::detector::DetectionResult;
use crate::geometry::Box2D;
use crate::paired::{Occlusion, ScenePair};

use super::EvalError;

/// Ground-truth box prepared for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: Box2D,
    pub ignore: bool,
}

/// The "reasonable" evaluation filter: objects below the height threshold
/// or more occluded than allowed become ignore regions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalFilter {
    pub min_height: f64,
    pub max_occlusion: Occlusion,
}

impl Default for EvalFilter {
    fn default() -> Self {
        EvalFilter { min_height: 0.0, max_occlusion: Occlusion::Partial }
    }
}

impl EvalFilter {
    /// The pedestrian-benchmark reasonable setup (height > 55 px, not or
    /// partially occluded).
    pub fn reasonable() -> Self {
        EvalFilter { min_height: 55.0, max_occlusion: Occlusion::Partial }
    }
}

/// Which modality's boxes score the detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Reference,
    Sensed,
}

/// Ground truth of one scene for the chosen modality. Objects absent from
/// that modality contribute their other-modality box as an ignore region.
pub fn modality_gt(scene: &ScenePair, modality: Modality, filter: &EvalFilter) -> Vec<GtBox> {
    let mut out = Vec::with_capacity(scene.objects.len());
    for obj in &scene.objects {
        let (own, other) = match modality {
            Modality::Reference => (&obj.ref_box, &obj.sensed_box),
            Modality::Sensed => (&obj.sensed_box, &obj.ref_box),
        };
        match own {
            Some(b) => {
                let fully_outside = {
                    let (x0, y0, x1, y1) = b.corners();
                    x1 <= 0.0
                        || y1 <= 0.0
                        || x0 >= scene.extent.width as f64
                        || y0 >= scene.extent.height as f64
                };
                let ignore = b.h < filter.min_height
                    || obj.occlusion > filter.max_occlusion
                    || fully_outside;
                out.push(GtBox { bbox: *b, ignore });
            }
            None => {
                if let Some(b) = other {
                    out.push(GtBox { bbox: *b, ignore: true });
                }
            }
        }
    }
    out
}

/// Outcome of one detection under greedy matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Greedy matching of one scene's detections (any order) against its ground
/// truth: detections are visited in descending confidence; each picks the
/// best unmatched non-ignored GT with IoU >= `iou_thr`, falling back to an
/// ignore region (which absorbs any number of detections).
pub fn match_scene(
    detections: &[DetectionResult],
    gt: &[GtBox],
    iou_thr: f64,
) -> Vec<(f64, MatchFlag)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .partial_cmp(&detections[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut gt_taken = vec![false; gt.len()];
    let mut out = Vec::with_capacity(detections.len());
    for di in order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if g.ignore || gt_taken[gi] {
                continue;
            }
            let v = det.bbox.iou(&g.bbox);
            if v >= iou_thr && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                best = Some((gi, v));
            }
        }
        let flag = match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                MatchFlag::TruePositive
            }
            None => {
                let hits_ignore = gt
                    .iter()
                    .any(|g| g.ignore && det.bbox.iou(&g.bbox) >= iou_thr);
                if hits_ignore {
                    MatchFlag::Ignored
                } else {
                    MatchFlag::FalsePositive
                }
            }
        };
        out.push((det.confidence, flag));
    }
    out
}

/// One operating point of the miss-rate / FPPI curve. The silent-detector
/// point (no threshold admits any detection) has `threshold: None`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MrCurvePoint {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub fppi: f64,
    pub miss_rate: f64,
}

/// Build the full miss-rate vs FPPI curve: one point per distinct
/// confidence threshold, plus the empty-detector point (fppi 0, miss 1).
pub fn mr_curve(
    detections: &[Vec<DetectionResult>],
    gts: &[Vec<GtBox>],
    iou_thr: f64,
) -> Result<Vec<MrCurvePoint>, EvalError> {
    assert_eq!(detections.len(), gts.len(), "detections and ground truth must align");
    let n_images = gts.len();
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| !b.ignore).count()).sum();
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut flagged: Vec<(f64, MatchFlag)> = Vec::new();
    for (dets, gt) in detections.iter().zip(gts) {
        flagged.extend(match_scene(dets, gt, iou_thr));
    }
    flagged.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut points = vec![MrCurvePoint { threshold: None, fppi: 0.0, miss_rate: 1.0 }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < flagged.len() {
        let conf = flagged[i].0;
        while i < flagged.len() && flagged[i].0 == conf {
            match flagged[i].1 {
                MatchFlag::TruePositive => tp += 1,
                MatchFlag::FalsePositive => fp += 1,
                MatchFlag::Ignored => {}
            }
            i += 1;
        }
        points.push(MrCurvePoint {
            threshold: Some(conf),
            fppi: fp as f64 / n_images as f64,
            miss_rate: (n_gt - tp) as f64 / n_gt as f64,
        });
    }
    Ok(points)
}

/// The nine log-spaced FPPI reference points over [1e-2, 1e0].
pub fn fppi_reference_points() -> [f64; 9] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + i as f64 * 0.25))
}

/// Log-average miss rate: geometric mean of the miss rate sampled at the
/// nine reference FPPI points; at each reference the best (lowest) miss
/// rate among operating points with FPPI at or under the reference is used,
/// which clamps references below the lowest achievable FPPI.
pub fn log_average_miss_rate(
    detections: &[Vec<DetectionResult>],
    gts: &[Vec<GtBox>],
    iou_thr: f64,
) -> Result<f64, EvalError> {
    let curve = mr_curve(detections, gts, iou_thr)?;
    let mut log_sum = 0.0;
    for r in fppi_reference_points() {
        let best = curve
            .iter()
            .filter(|p| p.fppi <= r)
            .map(|p| p.miss_rate)
            .fold(f64::INFINITY, f64::min);
        log_sum += best.ln();
    }
    Ok((log_sum / 9.0).exp())
}

/// Miss rate against the chosen modality's paired boxes.
pub fn modality_mr(
    detections: &[Vec<DetectionResult>],
    scenes: &[ScenePair],
    modality: Modality,
    filter: &EvalFilter,
    iou_thr: f64,
) -> Result<f64, EvalError> {
    let gts: Vec<Vec<GtBox>> =
        scenes.iter().map(|s| modality_gt(s, modality, filter)).collect();
    log_average_miss_rate(detections, &gts, iou_thr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64, conf: f64) -> DetectionResult {
        DetectionResult {
            bbox: Box2D::new(x, y, 10.0, 10.0).unwrap(),
            class_label: "disc".into(),
            confidence: conf,
            box3d: None,
        }
    }

    fn gt(x: f64, y: f64) -> GtBox {
        GtBox { bbox: Box2D::new(x, y, 10.0, 10.0).unwrap(), ignore: false }
    }

    #[test]
    fn perfect_detector_scores_zero() {
        let gts = vec![vec![gt(20.0, 20.0), gt(40.0, 40.0)], vec![gt(30.0, 30.0)]];
        let dets = vec![
            vec![det(20.0, 20.0, 1.0), det(40.0, 40.0, 1.0)],
            vec![det(30.0, 30.0, 1.0)],
        ];
        assert_eq!(log_average_miss_rate(&dets, &gts, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn silent_detector_scores_one() {
        let gts = vec![vec![gt(20.0, 20.0)]];
        let dets = vec![vec![]];
        assert_eq!(log_average_miss_rate(&dets, &gts, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let dets = vec![vec![det(10.0, 10.0, 0.9)]];
        assert!(matches!(
            log_average_miss_rate(&dets, &[vec![]], 0.5),
            Err(EvalError::NoGroundTruth)
        ));
    }

    #[test]
    fn ignored_gt_neither_misses_nor_penalizes() {
        let gts = vec![vec![
            gt(20.0, 20.0),
            GtBox { bbox: Box2D::new(40.0, 40.0, 10.0, 10.0).unwrap(), ignore: true },
        ]];
        // one matching detection on the real gt, one on the ignore region
        let dets = vec![vec![det(20.0, 20.0, 0.9), det(40.0, 40.0, 0.8)]];
        let mr = log_average_miss_rate(&dets, &gts, 0.5).unwrap();
        assert_eq!(mr, 0.0); // no misses and no false positives
    }

    #[test]
    fn false_positives_raise_fppi_not_miss() {
        let gts = vec![vec![gt(20.0, 20.0)], vec![gt(25.0, 25.0)]];
        // both gts hit at high confidence, one fp at low confidence
        let dets = vec![
            vec![det(20.0, 20.0, 0.9), det(50.0, 50.0, 0.3)],
            vec![det(25.0, 25.0, 0.8)],
        ];
        let curve = mr_curve(&dets, &gts, 0.5).unwrap();
        assert_eq!(curve.last().unwrap().fppi, 0.5);
        assert_eq!(curve.last().unwrap().miss_rate, 0.0);
        assert_eq!(log_average_miss_rate(&dets, &gts, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn ties_in_confidence_are_one_operating_point() {
        let gts = vec![vec![gt(20.0, 20.0), gt(40.0, 40.0)]];
        let dets = vec![vec![det(20.0, 20.0, 0.5), det(40.0, 40.0, 0.5)]];
        let curve = mr_curve(&dets, &gts, 0.5).unwrap();
        assert_eq!(curve.len(), 2); // start point plus the tied threshold
        assert_eq!(curve[1].miss_rate, 0.0);
    }

    #[test]
    fn detections_on_sensed_boxes_score_sensed_not_reference() {
        use crate::geometry::Extent;
        use crate::paired::{PairedObject, ScenePair};
        use ndarray::Array2;
        // every object shifted by (5, 0): sensed-perfect detections miss the
        // reference boxes at IoU 0.5 but nail the sensed ones
        let objects: Vec<PairedObject> = (0..3)
            .map(|i| PairedObject {
                pair_id: i,
                class_label: "disc".into(),
                ref_box: Some(Box2D::new(15.0 + 14.0 * i as f64, 30.0, 8.0, 8.0).unwrap()),
                sensed_box: Some(Box2D::new(20.0 + 14.0 * i as f64, 30.0, 8.0, 8.0).unwrap()),
                unpaired: false,
                occlusion: crate::paired::Occlusion::None,
                truncated: false,
                depth_patch: None,
                box3d: None,
            })
            .collect();
        let scene = ScenePair {
            scene_id: "s".into(),
            extent: Extent::new(64, 64),
            ref_image: Array2::zeros((64, 64)),
            sensed_image: Array2::zeros((64, 64)),
            objects,
            shift_field: None,
            intrinsics: None,
        };
        let dets: Vec<DetectionResult> = scene
            .objects
            .iter()
            .map(|o| DetectionResult {
                bbox: o.sensed_box.unwrap(),
                class_label: "disc".into(),
                confidence: 0.9,
                box3d: None,
            })
            .collect();
        let filter = EvalFilter::default();
        let mr_sensed =
            modality_mr(&[dets.clone()], &[scene.clone()], Modality::Sensed, &filter, 0.5)
                .unwrap();
        let mr_ref =
            modality_mr(&[dets], &[scene], Modality::Reference, &filter, 0.5).unwrap();
        assert_eq!(mr_sensed, 0.0);
        assert!(mr_ref > 0.0, "mr_ref {mr_ref}");
    }

    #[test]
    fn missed_sensed_only_object_penalizes_sensed_score_only() {
        use crate::geometry::Extent;
        use crate::paired::{PairedObject, ScenePair};
        use ndarray::Array2;
        let paired = PairedObject {
            pair_id: 0,
            class_label: "disc".into(),
            ref_box: Some(Box2D::new(20.0, 20.0, 8.0, 8.0).unwrap()),
            sensed_box: Some(Box2D::new(20.0, 20.0, 8.0, 8.0).unwrap()),
            unpaired: false,
            occlusion: crate::paired::Occlusion::None,
            truncated: false,
            depth_patch: None,
            box3d: None,
        };
        let sensed_only = PairedObject {
            pair_id: 1,
            class_label: "disc".into(),
            ref_box: None,
            sensed_box: Some(Box2D::new(45.0, 45.0, 8.0, 8.0).unwrap()),
            unpaired: true,
            occlusion: crate::paired::Occlusion::None,
            truncated: false,
            depth_patch: None,
            box3d: None,
        };
        let scene = ScenePair {
            scene_id: "s".into(),
            extent: Extent::new(64, 64),
            ref_image: Array2::zeros((64, 64)),
            sensed_image: Array2::zeros((64, 64)),
            objects: vec![paired, sensed_only],
            shift_field: None,
            intrinsics: None,
        };
        // only the paired object is found; the sensed-only one is missed
        let dets = vec![DetectionResult {
            bbox: Box2D::new(20.0, 20.0, 8.0, 8.0).unwrap(),
            class_label: "disc".into(),
            confidence: 0.9,
            box3d: None,
        }];
        let filter = EvalFilter::default();
        let mr_ref = modality_mr(&[dets.clone()], &[scene.clone()], Modality::Reference, &filter, 0.5)
            .unwrap();
        let mr_sensed =
            modality_mr(&[dets], &[scene], Modality::Sensed, &filter, 0.5).unwrap();
        assert_eq!(mr_ref, 0.0); // sensed-only object is an ignore region here
        assert!(mr_sensed > 0.0); // but a real miss for the sensed score
    }

    #[test]
    fn modality_gt_marks_unpaired_and_small_objects() {
        use crate::paired::{generate_scene_with, GeneratorParams, ShiftFieldConfig};
        use crate::geometry::Extent;
        let mut params =
            GeneratorParams::new(ShiftFieldConfig::aligned(), Extent::new(64, 64));
        params.shift.unpaired_rate = 1.0; // every object unpaired
        let scene = generate_scene_with(&params, 3, 5, "s").unwrap();
        let gts = modality_gt(&scene, Modality::Reference, &EvalFilter::default());
        // objects only in the sensed modality appear as ignore regions
        for (obj, g) in scene.objects.iter().zip(&gts) {
            assert_eq!(g.ignore, obj.ref_box.is_none());
        }
        let strict = EvalFilter { min_height: 1000.0, max_occlusion: Occlusion::Partial };
        for g in modality_gt(&scene, Modality::Reference, &strict) {
            assert!(g.ignore);
        }
    }
}
