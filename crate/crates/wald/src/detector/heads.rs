//! Per-RoI heads and the region pipeline: context pooling, shift prediction,
//! aligned re-pooling, confidence-aware fusion, and the classification /
//! regression head, with a full backward pass.
//!
//! The backward pass covers every differentiable path, including the
//! coordinate path through the aligned re-pooling (the pooled sensed feature
//! depends on the predicted shift through the sample positions), so finite
//! differences of the total loss agree with the analytic gradients.

use ndarray::{Array1, Array3};
use rand::Rng;

use crate::caf::{reweight_fuse, ConfidenceWeights};
use crate::geometry::{apply_shift, enlarge_roi, Box2D, ShiftTarget};
use crate::nn::{relu_vec, relu_vec_backward, softmax, Linear, LinearGrads};
use crate::rfa::{RfaCache, RfaHeadGrads};

use super::roi_align::{pool_region, pool_region_backward};
use super::{FeatureMap, ModelConfig, ModelError, ModelParams};

/// Auxiliary per-modality classifiers feeding the fusion weights. Two-way
/// logits: index 0 = background, 1 = foreground.
#[derive(Debug, Clone)]
pub struct CafBranches {
    pub aux_ref: Linear,
    pub aux_sensed: Linear,
}

#[derive(Debug, Clone)]
pub struct CafGrads {
    pub aux_ref: LinearGrads,
    pub aux_sensed: LinearGrads,
}

impl CafBranches {
    pub fn init<R: Rng>(region_len: usize, rng: &mut R) -> Self {
        let branch = |rng: &mut R| {
            let mut l = Linear::he_init(region_len, 2, rng);
            l.weight.mapv_inplace(|v| v * 0.1);
            // a mild foreground prior keeps the initial fusion weights away
            // from the |p1 - p0| = 0 kink
            l.bias[0] = -0.5;
            l.bias[1] = 0.5;
            l
        };
        CafBranches { aux_ref: branch(rng), aux_sensed: branch(rng) }
    }

    pub fn zero_grads(&self) -> CafGrads {
        CafGrads {
            aux_ref: self.aux_ref.zero_grads(),
            aux_sensed: self.aux_sensed.zero_grads(),
        }
    }
}

impl CafGrads {
    pub fn accumulate(&mut self, other: &CafGrads) {
        self.aux_ref.accumulate(&other.aux_ref);
        self.aux_sensed.accumulate(&other.aux_sensed);
    }
}

/// Detection head: one hidden layer, then classification, box refinement,
/// and (optionally) seven-entry 3-D offsets.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub fc1: Linear,
    pub cls: Linear,
    pub reg: Linear,
    pub reg3d: Option<Linear>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub fc1: LinearGrads,
    pub cls: LinearGrads,
    pub reg: LinearGrads,
    pub reg3d: Option<LinearGrads>,
}

impl HeadParams {
    pub fn init<R: Rng>(
        region_len: usize,
        hidden: usize,
        n_classes_with_bg: usize,
        with_3d: bool,
        rng: &mut R,
    ) -> Self {
        HeadParams {
            fc1: Linear::he_init(region_len, hidden, rng),
            cls: Linear::zeros(hidden, n_classes_with_bg),
            reg: Linear::zeros(hidden, 4),
            reg3d: with_3d.then(|| Linear::zeros(hidden, 7)),
        }
    }

    pub fn zero_grads(&self) -> HeadGrads {
        HeadGrads {
            fc1: self.fc1.zero_grads(),
            cls: self.cls.zero_grads(),
            reg: self.reg.zero_grads(),
            reg3d: self.reg3d.as_ref().map(|l| l.zero_grads()),
        }
    }
}

impl HeadGrads {
    pub fn accumulate(&mut self, other: &HeadGrads) {
        self.fc1.accumulate(&other.fc1);
        self.cls.accumulate(&other.cls);
        self.reg.accumulate(&other.reg);
        if let (Some(a), Some(b)) = (self.reg3d.as_mut(), other.reg3d.as_ref()) {
            a.accumulate(b);
        }
    }
}

/// Gradients of everything downstream of the feature maps.
#[derive(Debug, Clone)]
pub struct HeadStackGrads {
    pub rfa: Option<RfaHeadGrads>,
    pub caf: Option<CafGrads>,
    pub head: HeadGrads,
}

impl HeadStackGrads {
    pub fn zeros(params: &ModelParams) -> Self {
        HeadStackGrads {
            rfa: params.rfa.as_ref().map(|r| r.zero_grads()),
            caf: params.caf.as_ref().map(|c| c.zero_grads()),
            head: params.head.zero_grads(),
        }
    }

    pub fn accumulate(&mut self, other: &HeadStackGrads) {
        if let (Some(a), Some(b)) = (self.rfa.as_mut(), other.rfa.as_ref()) {
            a.accumulate(b);
        }
        if let (Some(a), Some(b)) = (self.caf.as_mut(), other.caf.as_ref()) {
            a.accumulate(b);
        }
        self.head.accumulate(&other.head);
    }
}

fn flat(a: &Array3<f64>) -> Array1<f64> {
    Array1::from_iter(a.iter().copied())
}

fn unflat(v: &Array1<f64>, dim: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_vec(dim, v.to_vec()).unwrap()
}

/// Everything produced by one RoI's pass through the heads, including the
/// cached activations needed for the backward pass.
#[derive(Debug, Clone)]
pub struct RoiForward {
    pub roi: Box2D,
    pub sensed_roi: Box2D,
    pub aligned_roi: Box2D,
    pub shift: ShiftTarget,
    pub cls_logits: Array1<f64>,
    pub cls_probs: Array1<f64>,
    pub reg: [f64; 4],
    pub v3d: Option<[f64; 7]>,
    pub weights: Option<ConfidenceWeights>,
    pub aux_ref_logits: Option<Array1<f64>>,
    pub aux_sensed_logits: Option<Array1<f64>>,
    pub sensed_fully_outside: bool,
    ctx_ref_box: Box2D,
    ctx_sensed_box: Box2D,
    ctx_ref: Array3<f64>,
    ctx_sensed: Array3<f64>,
    rf_ref: Array3<f64>,
    rf_sensed: Array3<f64>,
    rfa_cache: Option<RfaCache>,
    fused_flat: Array1<f64>,
    hidden: Array1<f64>,
}

/// Run one RoI through context pooling, shift prediction, aligned
/// re-pooling, fusion, and the detection head. `sensed_roi` equals `roi` at
/// inference and may be jittered during training.
pub fn forward_roi(
    params: &ModelParams,
    config: &ModelConfig,
    f_ref: &FeatureMap,
    f_sensed: &FeatureMap,
    roi: &Box2D,
    sensed_roi: &Box2D,
) -> Result<RoiForward, ModelError> {
    let pool = (config.pool_size, config.pool_size);
    let ctx_ref_box = enlarge_roi(roi, config.context_factor, config.input);
    let ctx_sensed_box = enlarge_roi(sensed_roi, config.context_factor, config.input);
    let ctx_ref = pool_region(f_ref, &ctx_ref_box, pool);
    let ctx_sensed = pool_region(f_sensed, &ctx_sensed_box, pool);

    let (shift, rfa_cache) = match &params.rfa {
        Some(rfa) => {
            let (t, cache) = rfa
                .forward_train(&ctx_ref.values, &ctx_sensed.values)
                .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
            (t, Some(cache))
        }
        None => (ShiftTarget::ZERO, None),
    };
    let aligned_roi = apply_shift(sensed_roi, &shift);

    let rf_ref = pool_region(f_ref, roi, pool);
    let rf_sensed = pool_region(f_sensed, &aligned_roi, pool);

    let (fused, weights, aux_ref_logits, aux_sensed_logits) = match &params.caf {
        Some(caf) => {
            let lr = caf.aux_ref.forward(&flat(&rf_ref.values));
            let ls = caf.aux_sensed.forward(&flat(&rf_sensed.values));
            let pr = softmax(&lr);
            let ps = softmax(&ls);
            let w = ConfidenceWeights::from_probs(pr[1], pr[0], ps[1], ps[0])
                .map_err(|e| ModelError::Config(e.to_string()))?;
            let fused = reweight_fuse(&rf_ref.values, &rf_sensed.values, &w)
                .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
            (fused, Some(w), Some(lr), Some(ls))
        }
        None => (&rf_ref.values + &rf_sensed.values, None, None, None),
    };

    let fused_flat = flat(&fused);
    let hidden = relu_vec(&params.head.fc1.forward(&fused_flat));
    let cls_logits = params.head.cls.forward(&hidden);
    let cls_probs = softmax(&cls_logits);
    let reg_out = params.head.reg.forward(&hidden);
    let v3d = params.head.reg3d.as_ref().map(|l| {
        let v = l.forward(&hidden);
        std::array::from_fn(|i| v[i])
    });

    Ok(RoiForward {
        roi: *roi,
        sensed_roi: *sensed_roi,
        aligned_roi,
        shift,
        cls_logits,
        cls_probs,
        reg: std::array::from_fn(|i| reg_out[i]),
        v3d,
        weights,
        aux_ref_logits,
        aux_sensed_logits,
        sensed_fully_outside: rf_sensed.fully_outside,
        ctx_ref_box,
        ctx_sensed_box,
        ctx_ref: ctx_ref.values,
        ctx_sensed: ctx_sensed.values,
        rf_ref: rf_ref.values,
        rf_sensed: rf_sensed.values,
        rfa_cache,
        fused_flat,
        hidden,
    })
}

/// Upstream loss gradients for one RoI.
#[derive(Debug, Clone, Default)]
pub struct RoiUpstream {
    pub d_cls_logits: Vec<f64>,
    pub d_reg: [f64; 4],
    pub d_v3d: Option<[f64; 7]>,
    /// Direct gradient on the predicted shift (from the shift loss), already
    /// weighted.
    pub d_shift: (f64, f64),
    pub d_aux_ref: Option<Vec<f64>>,
    pub d_aux_sensed: Option<Vec<f64>>,
}

/// Softmax backward: given probs and the upstream gradient on probs'
/// dependents expressed as d/d p, return d/d logits.
fn softmax_vjp(probs: &Array1<f64>, d_probs: &Array1<f64>) -> Array1<f64> {
    let dot = probs
        .iter()
        .zip(d_probs.iter())
        .map(|(p, g)| p * g)
        .sum::<f64>();
    Array1::from_iter(probs.iter().zip(d_probs.iter()).map(|(p, g)| p * (g - dot)))
}

/// Backward pass of [`forward_roi`]. Accumulates parameter gradients into
/// `grads` and feature-map gradients into `d_f_ref` / `d_f_sensed`.
#[allow(clippy::too_many_arguments)]
pub fn backward_roi(
    params: &ModelParams,
    config: &ModelConfig,
    f_ref: &FeatureMap,
    f_sensed: &FeatureMap,
    fwd: &RoiForward,
    up: &RoiUpstream,
    grads: &mut HeadStackGrads,
    d_f_ref: &mut Array3<f64>,
    d_f_sensed: &mut Array3<f64>,
) {
    let pool = (config.pool_size, config.pool_size);

    // detection head
    let mut d_hidden = Array1::zeros(fwd.hidden.raw_dim());
    {
        let d_cls = Array1::from_vec(up.d_cls_logits.clone());
        let (dh, g) = params.head.cls.backward(&fwd.hidden, &d_cls);
        d_hidden += &dh;
        grads.head.cls.accumulate(&g);
    }
    {
        let d_reg = Array1::from_vec(up.d_reg.to_vec());
        let (dh, g) = params.head.reg.backward(&fwd.hidden, &d_reg);
        d_hidden += &dh;
        grads.head.reg.accumulate(&g);
    }
    if let (Some(d_v), Some(l3)) = (up.d_v3d.as_ref(), params.head.reg3d.as_ref()) {
        let d = Array1::from_vec(d_v.to_vec());
        let (dh, g) = l3.backward(&fwd.hidden, &d);
        d_hidden += &dh;
        if let Some(slot) = grads.head.reg3d.as_mut() {
            slot.accumulate(&g);
        }
    }
    let d_hidden = relu_vec_backward(&fwd.hidden, &d_hidden);
    let (d_fused_flat, g_fc1) = params.head.fc1.backward(&fwd.fused_flat, &d_hidden);
    grads.head.fc1.accumulate(&g_fc1);
    let dim = fwd.rf_ref.dim();
    let d_fused = unflat(&d_fused_flat, dim);

    // fusion backward
    let mut d_rf_ref;
    let mut d_rf_sensed;
    match (&params.caf, &fwd.weights) {
        (Some(caf), Some(w)) => {
            let s = w.sensed_multiplier();
            d_rf_ref = &d_fused * w.w_ref;
            d_rf_sensed = &d_fused * s;

            // gradients on the scalar weights
            let d_w_ref: f64 = (&d_fused * &fwd.rf_ref).sum();
            let d_s: f64 = (&d_fused * &fwd.rf_sensed).sum();
            let d_w_sensed = d_s * w.w_disagree;
            let d_w_disagree = d_s * w.w_sensed;

            // chain onto the auxiliary probabilities
            // w_ref = |p1_r - p0_r|, w_sensed = |p1_s - p0_s|,
            // w_disagree = 1 - |p1_r - p1_s|
            let sr = (w.p1_ref - w.p0_ref).signum();
            let ss = (w.p1_sensed - w.p0_sensed).signum();
            let sd = (w.p1_ref - w.p1_sensed).signum();
            // probs vectors are [p0, p1]
            let mut d_pr = Array1::zeros(2);
            d_pr[1] += d_w_ref * sr - d_w_disagree * sd;
            d_pr[0] += -d_w_ref * sr;
            let mut d_ps = Array1::zeros(2);
            d_ps[1] += d_w_sensed * ss + d_w_disagree * sd;
            d_ps[0] += -d_w_sensed * ss;

            let probs_r = Array1::from_vec(vec![w.p0_ref, w.p1_ref]);
            let probs_s = Array1::from_vec(vec![w.p0_sensed, w.p1_sensed]);
            let mut d_lr = softmax_vjp(&probs_r, &d_pr);
            let mut d_ls = softmax_vjp(&probs_s, &d_ps);
            if let Some(extra) = &up.d_aux_ref {
                d_lr += &Array1::from_vec(extra.clone());
            }
            if let Some(extra) = &up.d_aux_sensed {
                d_ls += &Array1::from_vec(extra.clone());
            }

            let (d_flat_ref, g_ar) = caf.aux_ref.backward(&flat(&fwd.rf_ref), &d_lr);
            let (d_flat_sensed, g_as) = caf.aux_sensed.backward(&flat(&fwd.rf_sensed), &d_ls);
            if let Some(slot) = grads.caf.as_mut() {
                slot.aux_ref.accumulate(&g_ar);
                slot.aux_sensed.accumulate(&g_as);
            }
            d_rf_ref += &unflat(&d_flat_ref, dim);
            d_rf_sensed += &unflat(&d_flat_sensed, dim);
        }
        _ => {
            d_rf_ref = d_fused.clone();
            d_rf_sensed = d_fused;
        }
    }

    // tight pooling backward; the ref RoI is a leaf, the aligned sensed RoI
    // depends on the predicted shift through its center
    let g_ref = pool_region_backward(f_ref, &fwd.roi, pool, &d_rf_ref);
    *d_f_ref += &g_ref.features;
    let g_sensed = pool_region_backward(f_sensed, &fwd.aligned_roi, pool, &d_rf_sensed);
    *d_f_sensed += &g_sensed.features;

    let mut d_shift = up.d_shift;
    if params.rfa.is_some() && config.align_coord_grad {
        d_shift.0 += g_sensed.d_box[0] * fwd.sensed_roi.w;
        d_shift.1 += g_sensed.d_box[1] * fwd.sensed_roi.h;
    }

    // shift head backward into the context features
    if let (Some(rfa), Some(cache)) = (&params.rfa, &fwd.rfa_cache) {
        let (d_ctx_ref, d_ctx_sensed, g_rfa) = rfa.backward(cache, d_shift);
        if let Some(slot) = grads.rfa.as_mut() {
            slot.accumulate(&g_rfa);
        }
        let g = pool_region_backward(f_ref, &fwd.ctx_ref_box, pool, &d_ctx_ref);
        *d_f_ref += &g.features;
        let g = pool_region_backward(f_sensed, &fwd.ctx_sensed_box, pool, &d_ctx_sensed);
        *d_f_sensed += &g.features;
    }
    let _ = &fwd.ctx_ref;
    let _ = &fwd.ctx_sensed;
}

/// Forward pass of the shift head alone for a 4-neighbour RoI (the adjacent
/// similarity constraint path).
#[derive(Debug, Clone)]
pub struct NeighborForward {
    pub shift: ShiftTarget,
    ctx_ref_box: Box2D,
    ctx_sensed_box: Box2D,
    rfa_cache: RfaCache,
}

pub fn forward_neighbor(
    params: &ModelParams,
    config: &ModelConfig,
    f_ref: &FeatureMap,
    f_sensed: &FeatureMap,
    neighbor_ref: &Box2D,
    neighbor_sensed: &Box2D,
) -> Result<Option<NeighborForward>, ModelError> {
    let Some(rfa) = &params.rfa else { return Ok(None) };
    let pool = (config.pool_size, config.pool_size);
    let ctx_ref_box = enlarge_roi(neighbor_ref, config.context_factor, config.input);
    let ctx_sensed_box = enlarge_roi(neighbor_sensed, config.context_factor, config.input);
    let ctx_ref = pool_region(f_ref, &ctx_ref_box, pool);
    let ctx_sensed = pool_region(f_sensed, &ctx_sensed_box, pool);
    let (shift, cache) = rfa
        .forward_train(&ctx_ref.values, &ctx_sensed.values)
        .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
    Ok(Some(NeighborForward { shift, ctx_ref_box, ctx_sensed_box, rfa_cache: cache }))
}

#[allow(clippy::too_many_arguments)]
pub fn backward_neighbor(
    params: &ModelParams,
    config: &ModelConfig,
    f_ref: &FeatureMap,
    f_sensed: &FeatureMap,
    fwd: &NeighborForward,
    d_shift: (f64, f64),
    grads: &mut HeadStackGrads,
    d_f_ref: &mut Array3<f64>,
    d_f_sensed: &mut Array3<f64>,
) {
    let Some(rfa) = &params.rfa else { return };
    let pool = (config.pool_size, config.pool_size);
    let (d_ctx_ref, d_ctx_sensed, g_rfa) = rfa.backward(&fwd.rfa_cache, d_shift);
    if let Some(slot) = grads.rfa.as_mut() {
        slot.accumulate(&g_rfa);
    }
    let g = pool_region_backward(f_ref, &fwd.ctx_ref_box, pool, &d_ctx_ref);
    *d_f_ref += &g.features;
    let g = pool_region_backward(f_sensed, &fwd.ctx_sensed_box, pool, &d_ctx_sensed);
    *d_f_sensed += &g.features;
}
