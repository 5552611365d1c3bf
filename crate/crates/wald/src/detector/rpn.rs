//! Fused region proposal stage: the two modality feature maps are combined
//! element-wise and a small convolutional head scores one objectness logit
//! and four box deltas per anchor.

use ndarray::Array3;
use rand::Rng;

use crate::geometry::{Box2D, Extent};
use crate::nn::{relu, relu_backward, sigmoid, Conv2d, Conv2dGrads, PointwiseConv, PointwiseGrads};

use super::{clip_box, decode_box_deltas, nms, FeatureMap, ModelError, Proposal};

#[derive(Debug, Clone)]
pub struct RpnParams {
    pub conv: Conv2d,
    /// 1x1 head producing `n_anchors * 5` channels: per anchor one
    /// objectness logit followed by (dx, dy, dw, dh).
    pub head: PointwiseConv,
}

#[derive(Debug, Clone)]
pub struct RpnGrads {
    pub conv: Conv2dGrads,
    pub head: PointwiseGrads,
}

#[derive(Debug, Clone)]
pub struct RpnCache {
    fused: Array3<f64>,
    mid: Array3<f64>,
}

impl RpnParams {
    pub fn init<R: Rng>(channels: usize, n_anchors: usize, rng: &mut R) -> Self {
        RpnParams {
            conv: Conv2d::he_init(channels, channels, rng),
            // zero head: untrained objectness sits at sigmoid(0) = 0.5
            head: PointwiseConv::zeros(channels, n_anchors * 5),
        }
    }

    pub fn forward(&self, fused: &Array3<f64>) -> Array3<f64> {
        self.head.forward(&relu(&self.conv.forward(fused)))
    }

    pub fn forward_train(&self, fused: Array3<f64>) -> (Array3<f64>, RpnCache) {
        let mid = relu(&self.conv.forward(&fused));
        let raw = self.head.forward(&mid);
        (raw, RpnCache { fused, mid })
    }

    /// Returns the gradient with respect to the fused map plus parameter
    /// gradients.
    pub fn backward(&self, cache: &RpnCache, d_raw: &Array3<f64>) -> (Array3<f64>, RpnGrads) {
        let (d_mid, g_head) = self.head.backward(&cache.mid, d_raw);
        let d_mid = relu_backward(&cache.mid, &d_mid);
        let (d_fused, g_conv) = self.conv.backward(&cache.fused, &d_mid);
        (d_fused, RpnGrads { conv: g_conv, head: g_head })
    }

    pub fn zero_grads(&self) -> RpnGrads {
        RpnGrads { conv: self.conv.zero_grads(), head: self.head.zero_grads() }
    }
}

impl RpnGrads {
    pub fn accumulate(&mut self, other: &RpnGrads) {
        self.conv.accumulate(&other.conv);
        self.head.accumulate(&other.head);
    }
}

/// Square anchors centered on each feature cell, ordered (row, column,
/// size). Index `(y * width + x) * n_sizes + s` matches the head's channel
/// layout.
pub fn anchor_grid(sizes: &[f64], feat_h: usize, feat_w: usize, stride: usize) -> Vec<Box2D> {
    let mut anchors = Vec::with_capacity(feat_h * feat_w * sizes.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for &s in sizes {
                anchors.push(Box2D { x: cx, y: cy, w: s, h: s });
            }
        }
    }
    anchors
}

/// Read the per-anchor (logit, deltas) out of the raw head output.
pub fn anchor_outputs(raw: &Array3<f64>, n_sizes: usize) -> Vec<(f64, [f64; 4])> {
    let (c, h, w) = raw.dim();
    debug_assert_eq!(c, n_sizes * 5);
    let mut out = Vec::with_capacity(h * w * n_sizes);
    for y in 0..h {
        for x in 0..w {
            for a in 0..n_sizes {
                let base = a * 5;
                out.push((
                    raw[(base, y, x)],
                    [
                        raw[(base + 1, y, x)],
                        raw[(base + 2, y, x)],
                        raw[(base + 3, y, x)],
                        raw[(base + 4, y, x)],
                    ],
                ));
            }
        }
    }
    out
}

/// Aggregate the two modality maps and emit at most `top_k` proposals sorted
/// by objectness, clipped to the image and de-duplicated by NMS.
pub fn propose_regions(
    f_ref: &FeatureMap,
    f_sensed: &FeatureMap,
    rpn: &RpnParams,
    anchor_sizes: &[f64],
    extent: Extent,
    rpn_nms_iou: f64,
    top_k: usize,
) -> Result<Vec<Proposal>, ModelError> {
    if f_ref.values.dim() != f_sensed.values.dim() || f_ref.stride != f_sensed.stride {
        return Err(ModelError::ShapeMismatch(format!(
            "feature maps disagree: {:?} vs {:?}",
            f_ref.values.dim(),
            f_sensed.values.dim()
        )));
    }
    if top_k == 0 {
        return Ok(Vec::new());
    }
    let fused = &f_ref.values + &f_sensed.values;
    let raw = rpn.forward(&fused);
    let (_, fh, fw) = f_ref.values.dim();
    let anchors = anchor_grid(anchor_sizes, fh, fw, f_ref.stride);
    let outputs = anchor_outputs(&raw, anchor_sizes.len());
    let mut candidates: Vec<(Box2D, f64)> = Vec::with_capacity(anchors.len());
    for (anchor, (logit, deltas)) in anchors.iter().zip(&outputs) {
        let decoded = clip_box(&decode_box_deltas(anchor, deltas), extent);
        if decoded.w < 1.0 || decoded.h < 1.0 {
            continue;
        }
        candidates.push((decoded, sigmoid(*logit)));
    }
    let kept = nms(&candidates, rpn_nms_iou);
    Ok(kept
        .into_iter()
        .take(top_k)
        .map(|i| Proposal { roi: candidates[i].0, objectness: candidates[i].1 })
        .collect())
}
