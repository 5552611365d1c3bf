//! Two-stream detector: convolutional backbone per modality, fused region
//! proposal stage, RoI feature pooling, alignment and fusion heads, and the
//! end-to-end detection pipeline.

mod backbone;
mod checkpoint;
mod heads;
mod inference;
pub mod roi_align;
mod rpn;
pub mod train;

pub use backbone::{StreamCache, StreamGrads, StreamParams};
pub use checkpoint::{load_checkpoint, save_checkpoint, TensorSlot, CHECKPOINT_FORMAT_VERSION};
pub use heads::{
    backward_neighbor, backward_roi, forward_neighbor, forward_roi, CafBranches, CafGrads,
    HeadGrads, HeadParams, HeadStackGrads, NeighborForward, RoiForward, RoiUpstream,
};
pub use inference::{detect, detect_with_stats, extract_features, DetectStats};
pub use roi_align::{pool_region, pool_region_backward, PoolGrad, PooledRegion};
pub use rpn::{anchor_grid, propose_regions, RpnCache, RpnGrads, RpnParams};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::box3d::{Box3D, ClassDims};
use crate::geometry::{Box2D, Extent};
use crate::rfa::RfaHead;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("scene extent {got_w}x{got_h} does not match configured input {want_w}x{want_h}")]
    InputSize { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad model configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("model was trained without 3-D head but a 3-D metric was requested")]
    No3dHead,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Backbone output: one (channels, height, width) activation volume plus the
/// pixel stride of each feature cell relative to the input image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }
}

/// A candidate object region with its objectness score.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub roi: Box2D,
    pub objectness: f64,
}

/// Final detector output in reference-image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub bbox: Box2D,
    pub class_label: String,
    pub confidence: f64,
    pub box3d: Option<Box3D>,
}

/// Cross-modal combination of pooled region features ahead of the shift
/// predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    #[default]
    Sum,
    Concat,
}

/// Full architecture configuration. Stored with every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input: Extent,
    /// Foreground class labels; internally class 0 is background.
    pub classes: Vec<String>,
    /// Channels of the three backbone blocks.
    pub channels: [usize; 3],
    /// RoI pooling output is pool_size x pool_size.
    pub pool_size: usize,
    /// Detection head hidden width.
    pub hidden: usize,
    /// Shift-prediction head hidden width.
    pub rfa_hidden: usize,
    pub combiner: Combiner,
    /// RoI context enlargement ahead of shift prediction.
    pub context_factor: f64,
    /// Square anchor side lengths, pixels.
    pub anchor_sizes: Vec<f64>,
    /// Multiplier applied to the sensed image at input (e.g. 1/max_depth).
    pub sensed_scale: f64,
    /// Region feature alignment on/off (ablation switch).
    pub rfa_enabled: bool,
    /// Confidence-aware fusion on/off (ablation switch).
    pub caf_enabled: bool,
    /// 3-D regression head.
    pub with_3d: bool,
    /// Class-average 3-D dimensions, required when `with_3d`.
    #[serde(default)]
    pub class_dims: ClassDims,
    pub nms_iou: f64,
    pub rpn_nms_iou: f64,
    /// Proposals kept per scene at inference.
    pub proposal_count: usize,
    /// Whether the training gradient flows from the detection losses into
    /// the predicted shift through the aligned re-pooling coordinates. When
    /// off, the shift head learns from the shift loss alone.
    #[serde(default)]
    pub align_coord_grad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::small(vec!["disc".to_string()])
    }
}

impl ModelConfig {
    /// Desk-scale defaults for a 64x64 synthetic scene.
    pub fn small(classes: Vec<String>) -> Self {
        ModelConfig {
            input: Extent::new(64, 64),
            classes,
            channels: [8, 16, 16],
            pool_size: 7,
            hidden: 96,
            rfa_hidden: 96,
            combiner: Combiner::Sum,
            context_factor: crate::geometry::DEFAULT_CONTEXT_FACTOR,
            anchor_sizes: vec![7.0, 11.0, 16.0],
            sensed_scale: 1.0,
            rfa_enabled: true,
            caf_enabled: true,
            with_3d: false,
            class_dims: ClassDims::new(),
            nms_iou: 0.5,
            rpn_nms_iou: 0.7,
            proposal_count: 64,
            align_coord_grad: false,
        }
    }

    pub const STRIDE: usize = 4;

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes.is_empty() {
            return Err(ModelError::Config("at least one foreground class required".into()));
        }
        if self.input.width % Self::STRIDE != 0 || self.input.height % Self::STRIDE != 0 {
            return Err(ModelError::Config(format!(
                "input {}x{} must be divisible by the feature stride {}",
                self.input.width,
                self.input.height,
                Self::STRIDE
            )));
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|s| *s <= 0.0) {
            return Err(ModelError::Config("anchor sizes must be positive".into()));
        }
        if self.context_factor < 1.0 {
            return Err(ModelError::Config("context_factor must be >= 1".into()));
        }
        if self.with_3d {
            for c in &self.classes {
                if !self.class_dims.contains_key(c) {
                    return Err(ModelError::Config(format!(
                        "with_3d requires class-average dims for {c:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_classes_with_bg(&self) -> usize {
        self.classes.len() + 1
    }

    /// Flattened pooled-feature length seen by the per-RoI heads.
    pub fn region_feature_len(&self) -> usize {
        self.channels[2] * self.pool_size * self.pool_size
    }

    /// FNV-1a hash of the canonical JSON, stored in checkpoints so a
    /// checkpoint cannot silently load under a different architecture.
    pub fn config_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
        }
        hash
    }
}

/// All learnable tensors of the detector.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub stream_ref: StreamParams,
    pub stream_sensed: StreamParams,
    pub rpn: RpnParams,
    pub rfa: Option<RfaHead>,
    pub caf: Option<CafBranches>,
    pub head: HeadParams,
}

/// A detector: immutable during inference, single-writer during training.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl DetectorModel {
    /// Initialize a fresh model; deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let params = ModelParams {
            stream_ref: StreamParams::init(config.channels, &mut rng),
            stream_sensed: StreamParams::init(config.channels, &mut rng),
            rpn: RpnParams::init(config.channels[2], config.anchor_sizes.len(), &mut rng),
            rfa: config.rfa_enabled.then(|| {
                RfaHead::init(
                    config.region_feature_len(),
                    config.rfa_hidden,
                    config.combiner,
                    &mut rng,
                )
            }),
            caf: config
                .caf_enabled
                .then(|| CafBranches::init(config.region_feature_len(), &mut rng)),
            head: HeadParams::init(
                config.region_feature_len(),
                config.hidden,
                config.n_classes_with_bg(),
                config.with_3d,
                &mut rng,
            ),
        };
        Ok(DetectorModel { config, params })
    }
}

/// Greedy non-maximum suppression; returns kept indices in descending score
/// order with stable index tie-breaking.
pub fn nms(items: &[(Box2D, f64)], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b].1.partial_cmp(&items[a].1).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| items[k].0.iou(&items[i].0) <= iou_thr) {
            kept.push(i);
        }
    }
    kept
}

/// Fast-R-CNN-style box refinement encoding of `gt` against `roi`.
pub fn encode_box_deltas(roi: &Box2D, gt: &Box2D) -> [f64; 4] {
    [
        (gt.x - roi.x) / roi.w,
        (gt.y - roi.y) / roi.h,
        (gt.w / roi.w).ln(),
        (gt.h / roi.h).ln(),
    ]
}

/// Invert [`encode_box_deltas`]; log-size deltas are clamped to keep decoded
/// boxes finite for wild predictions.
pub fn decode_box_deltas(roi: &Box2D, d: &[f64; 4]) -> Box2D {
    let clamp = |v: f64| v.clamp(-4.0, 4.0);
    Box2D {
        x: roi.x + d[0] * roi.w,
        y: roi.y + d[1] * roi.h,
        w: roi.w * clamp(d[2]).exp(),
        h: roi.h * clamp(d[3]).exp(),
    }
}

/// Clip a box to the image extent, keeping a minimal sliver inside.
pub fn clip_box(b: &Box2D, extent: Extent) -> Box2D {
    let (x0, y0, x1, y1) = b.corners();
    let (bw, bh) = (extent.width as f64, extent.height as f64);
    let cx0 = x0.clamp(0.0, bw);
    let cy0 = y0.clamp(0.0, bh);
    let cx1 = x1.clamp(0.0, bw);
    let cy1 = y1.clamp(0.0, bh);
    let w = (cx1 - cx0).max(1e-3);
    let h = (cy1 - cy0).max(1e-3);
    Box2D { x: cx0 + w / 2.0, y: cy0 + h / 2.0, w, h }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_delta_round_trip() {
        let roi = Box2D::new(30.0, 20.0, 12.0, 9.0).unwrap();
        let gt = Box2D::new(33.5, 18.0, 14.0, 11.0).unwrap();
        let back = decode_box_deltas(&roi, &encode_box_deltas(&roi, &gt));
        assert!((back.x - gt.x).abs() < 1e-9);
        assert!((back.y - gt.y).abs() < 1e-9);
        assert!((back.w - gt.w).abs() < 1e-9);
        assert!((back.h - gt.h).abs() < 1e-9);
    }

    #[test]
    fn nms_suppresses_overlaps_keeps_best() {
        let a = Box2D::new(10.0, 10.0, 10.0, 10.0).unwrap();
        let b = Box2D::new(11.0, 10.0, 10.0, 10.0).unwrap(); // heavy overlap with a
        let c = Box2D::new(40.0, 40.0, 10.0, 10.0).unwrap();
        let kept = nms(&[(a, 0.7), (b, 0.9), (c, 0.5)], 0.5);
        assert_eq!(kept, vec![1, 2]);
    }

    #[test]
    fn config_hash_changes_with_architecture() {
        let a = ModelConfig::small(vec!["disc".into()]);
        let mut b = a.clone();
        b.hidden += 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
