//! Region feature alignment: per-RoI shift prediction, aligned re-pooling,
//! the position-shift loss with its adjacent similarity constraint, RoI
//! jitter augmentation, minibatch label assignment, and the multi-task loss.
//!
//! Shift targets are defined per RoI: the target of a RoI matched to an
//! object pair is the displacement that carries the RoI center onto the
//! object's sensed box center, in units of the RoI size. For a RoI equal to
//! the reference ground-truth box this reduces to the canonical
//! reference-to-sensed shift of the pair, and it is the unique convention
//! under which jitter enrichment composes exactly: after jittering by `t_j`
//! the enriched target is `t* - t_j`.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::roi_align::{pool_region, PooledRegion};
use crate::detector::{Combiner, FeatureMap, Proposal};
use crate::geometry::{apply_shift, shift_targets, Box2D, ShiftTarget};
use crate::nn::{
    relu_vec, relu_vec_backward, smooth_l1, smooth_l1_grad, softmax_cross_entropy, Linear,
    LinearGrads,
};
use crate::paired::PairedObject;

#[derive(Debug, Error, PartialEq)]
pub enum RfaError {
    #[error("positive RoI {roi_index} has no shift target")]
    MissingTarget { roi_index: usize },
    #[error("prediction references RoI {roi_index} but only {len} labels were given")]
    IndexOutOfBounds { roi_index: usize, len: usize },
    #[error("region feature shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("invalid thresholds: bg_thr={bg_thr}, fg_thr={fg_thr}")]
    InvalidThresholds { fg_thr: f64, bg_thr: f64 },
}

/// One RoI's predicted shift, its target (absent for unpaired positives and
/// background), and the 4-neighbour prediction feeding the adjacent
/// similarity constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftPrediction {
    pub roi_index: usize,
    pub predicted: ShiftTarget,
    pub target: Option<ShiftTarget>,
    pub neighbor_predicted: Option<ShiftTarget>,
}

/// Weights of the multi-task loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the position-shift loss.
    pub lambda1: f64,
    /// Weight of the adjacent similarity constraint.
    pub lambda2: f64,
    /// Transition point of the robust (smooth-L1) penalty.
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda1: 0.75, lambda2: 0.25, smooth_l1_beta: 1.0 }
    }
}

/// Standard deviations of the RoI jitter distribution, in shift-target
/// (dimensionless) units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    pub sigma0: f64,
    pub sigma1: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig { sigma0: 0.05, sigma1: 0.05 }
    }
}

/// The shift-prediction head: cross-modal combination of the two pooled
/// context features followed by two fully connected layers.
#[derive(Debug, Clone)]
pub struct RfaHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub combiner: Combiner,
}

#[derive(Debug, Clone)]
pub struct RfaHeadGrads {
    pub fc1: LinearGrads,
    pub fc2: LinearGrads,
}

#[derive(Debug, Clone)]
pub struct RfaCache {
    input: Array1<f64>,
    hidden: Array1<f64>,
    ref_dim: (usize, usize, usize),
}

impl RfaHead {
    /// He-initialized hidden layer, zero-initialized output layer: a fresh
    /// head predicts a zero shift for any input.
    pub fn init<R: Rng>(
        region_len: usize,
        hidden: usize,
        combiner: Combiner,
        rng: &mut R,
    ) -> Self {
        let in_dim = match combiner {
            Combiner::Sum => region_len,
            Combiner::Concat => 2 * region_len,
        };
        RfaHead {
            fc1: Linear::he_init(in_dim, hidden, rng),
            fc2: Linear::zeros(hidden, 2),
            combiner,
        }
    }

    fn combine(
        &self,
        rf_ref: &Array3<f64>,
        rf_sensed: &Array3<f64>,
    ) -> Result<Array1<f64>, RfaError> {
        if rf_ref.dim() != rf_sensed.dim() {
            return Err(RfaError::ShapeMismatch(rf_ref.dim(), rf_sensed.dim()));
        }
        let flat_ref = rf_ref.iter().copied();
        let flat_sensed = rf_sensed.iter().copied();
        Ok(match self.combiner {
            Combiner::Sum => {
                Array1::from_iter(flat_ref.zip(flat_sensed).map(|(a, b)| a + b))
            }
            Combiner::Concat => Array1::from_iter(flat_ref.chain(flat_sensed)),
        })
    }

    pub fn predict(
        &self,
        rf_ref: &Array3<f64>,
        rf_sensed: &Array3<f64>,
    ) -> Result<ShiftTarget, RfaError> {
        let x = self.combine(rf_ref, rf_sensed)?;
        let h = relu_vec(&self.fc1.forward(&x));
        let out = self.fc2.forward(&h);
        Ok(ShiftTarget::new(out[0], out[1]))
    }

    pub fn forward_train(
        &self,
        rf_ref: &Array3<f64>,
        rf_sensed: &Array3<f64>,
    ) -> Result<(ShiftTarget, RfaCache), RfaError> {
        let x = self.combine(rf_ref, rf_sensed)?;
        let h = relu_vec(&self.fc1.forward(&x));
        let out = self.fc2.forward(&h);
        Ok((
            ShiftTarget::new(out[0], out[1]),
            RfaCache { input: x, hidden: h, ref_dim: rf_ref.dim() },
        ))
    }

    /// Backward from the gradient of the predicted (t_x, t_y); returns the
    /// gradients of the two region features and of the head parameters.
    pub fn backward(
        &self,
        cache: &RfaCache,
        d_shift: (f64, f64),
    ) -> (Array3<f64>, Array3<f64>, RfaHeadGrads) {
        let d_out = Array1::from_vec(vec![d_shift.0, d_shift.1]);
        let (d_h, g2) = self.fc2.backward(&cache.hidden, &d_out);
        let d_h = relu_vec_backward(&cache.hidden, &d_h);
        let (d_x, g1) = self.fc1.backward(&cache.input, &d_h);
        let n = cache.ref_dim.0 * cache.ref_dim.1 * cache.ref_dim.2;
        let (d_ref, d_sensed) = match self.combiner {
            Combiner::Sum => {
                let d = Array3::from_shape_vec(cache.ref_dim, d_x.to_vec()).unwrap();
                (d.clone(), d)
            }
            Combiner::Concat => {
                let v = d_x.to_vec();
                (
                    Array3::from_shape_vec(cache.ref_dim, v[..n].to_vec()).unwrap(),
                    Array3::from_shape_vec(cache.ref_dim, v[n..].to_vec()).unwrap(),
                )
            }
        };
        (d_ref, d_sensed, RfaHeadGrads { fc1: g1, fc2: g2 })
    }

    pub fn zero_grads(&self) -> RfaHeadGrads {
        RfaHeadGrads { fc1: self.fc1.zero_grads(), fc2: self.fc2.zero_grads() }
    }
}

impl RfaHeadGrads {
    pub fn accumulate(&mut self, other: &RfaHeadGrads) {
        self.fc1.accumulate(&other.fc1);
        self.fc2.accumulate(&other.fc2);
    }
}

/// Predict the (t_x, t_y) displacement of one region from its two pooled
/// context features.
pub fn predict_region_shift(
    rf_ref: &Array3<f64>,
    rf_sensed: &Array3<f64>,
    head: &RfaHead,
) -> Result<ShiftTarget, RfaError> {
    head.predict(rf_ref, rf_sensed)
}

/// Re-pool the sensed features at the shift-corrected region:
/// `pool_region(f_sensed, apply_shift(roi, t))`.
pub fn align_and_repool(
    f_sensed: &FeatureMap,
    roi: &Box2D,
    t: &ShiftTarget,
    out: (usize, usize),
) -> PooledRegion {
    pool_region(f_sensed, &apply_shift(roi, t), out)
}

/// Position-shift loss: mean smooth-L1 between predicted and target shifts
/// over the to-be-aligned (positive, paired) RoIs. Background RoIs are
/// masked out by their zero class label.
pub fn shift_loss(
    predictions: &[ShiftPrediction],
    labels: &[usize],
    beta: f64,
) -> Result<f64, RfaError> {
    let mut total = 0.0;
    let mut n_shift = 0usize;
    for p in predictions {
        let label = *labels
            .get(p.roi_index)
            .ok_or(RfaError::IndexOutOfBounds { roi_index: p.roi_index, len: labels.len() })?;
        if label == 0 {
            continue;
        }
        let t = p.target.ok_or(RfaError::MissingTarget { roi_index: p.roi_index })?;
        total += smooth_l1(p.predicted.t_x - t.t_x, beta) + smooth_l1(p.predicted.t_y - t.t_y, beta);
        n_shift += 1;
    }
    if n_shift == 0 {
        return Ok(0.0);
    }
    Ok(total / n_shift as f64)
}

/// Gradient of [`shift_loss`] with respect to each prediction.
pub fn shift_loss_grads(
    predictions: &[ShiftPrediction],
    labels: &[usize],
    beta: f64,
) -> Result<Vec<(f64, f64)>, RfaError> {
    let n_shift = predictions
        .iter()
        .filter(|p| labels.get(p.roi_index).map(|l| *l > 0).unwrap_or(false))
        .count();
    let mut grads = vec![(0.0, 0.0); predictions.len()];
    if n_shift == 0 {
        return Ok(grads);
    }
    for (i, p) in predictions.iter().enumerate() {
        let label = *labels
            .get(p.roi_index)
            .ok_or(RfaError::IndexOutOfBounds { roi_index: p.roi_index, len: labels.len() })?;
        if label == 0 {
            continue;
        }
        let t = p.target.ok_or(RfaError::MissingTarget { roi_index: p.roi_index })?;
        grads[i] = (
            smooth_l1_grad(p.predicted.t_x - t.t_x, beta) / n_shift as f64,
            smooth_l1_grad(p.predicted.t_y - t.t_y, beta) / n_shift as f64,
        );
    }
    Ok(grads)
}

/// Adjacent similarity constraint: the same loss form as [`shift_loss`]
/// applied to the 4-neighbour predictions against the RoI's own target.
pub fn asc_loss(
    predictions: &[ShiftPrediction],
    labels: &[usize],
    beta: f64,
) -> Result<f64, RfaError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in predictions {
        let label = *labels
            .get(p.roi_index)
            .ok_or(RfaError::IndexOutOfBounds { roi_index: p.roi_index, len: labels.len() })?;
        if label == 0 {
            continue;
        }
        let Some(nb) = p.neighbor_predicted else { continue };
        let t = p.target.ok_or(RfaError::MissingTarget { roi_index: p.roi_index })?;
        total += smooth_l1(nb.t_x - t.t_x, beta) + smooth_l1(nb.t_y - t.t_y, beta);
        n += 1;
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(total / n as f64)
}

/// Gradient of [`asc_loss`] with respect to each neighbour prediction.
pub fn asc_loss_grads(
    predictions: &[ShiftPrediction],
    labels: &[usize],
    beta: f64,
) -> Result<Vec<(f64, f64)>, RfaError> {
    let n_asc = predictions
        .iter()
        .filter(|p| {
            p.neighbor_predicted.is_some()
                && labels.get(p.roi_index).map(|l| *l > 0).unwrap_or(false)
        })
        .count();
    let mut grads = vec![(0.0, 0.0); predictions.len()];
    if n_asc == 0 {
        return Ok(grads);
    }
    for (i, p) in predictions.iter().enumerate() {
        let label = *labels
            .get(p.roi_index)
            .ok_or(RfaError::IndexOutOfBounds { roi_index: p.roi_index, len: labels.len() })?;
        if label == 0 {
            continue;
        }
        let Some(nb) = p.neighbor_predicted else { continue };
        let t = p.target.ok_or(RfaError::MissingTarget { roi_index: p.roi_index })?;
        grads[i] = (
            smooth_l1_grad(nb.t_x - t.t_x, beta) / n_asc as f64,
            smooth_l1_grad(nb.t_y - t.t_y, beta) / n_asc as f64,
        );
    }
    Ok(grads)
}

/// Sample one of the four nearest feature-stride neighbours of a RoI: the
/// RoI translated by exactly `stride` pixels along one axis.
pub fn asc_pair<R: Rng>(roi: &Box2D, feature_stride: usize, rng: &mut R) -> Box2D {
    debug_assert!(feature_stride >= 1);
    let s = feature_stride as f64;
    match rng.gen_range(0..4u8) {
        0 => roi.translated(s, 0.0),
        1 => roi.translated(-s, 0.0),
        2 => roi.translated(0.0, s),
        _ => roi.translated(0.0, -s),
    }
}

/// Gaussian RoI jitter: draws `t_j ~ N(0, sigma0^2) x N(0, sigma1^2)` and
/// displaces the (sensed-side) RoI by it. Returns the jittered RoI and the
/// drawn jitter target; the caller enriches the RoI's shift target as
/// `target - t_j` so that aligning the jittered RoI still lands on the
/// sensed ground truth.
pub fn roi_jitter<R: Rng>(
    roi: &Box2D,
    cfg: &JitterConfig,
    rng: &mut R,
) -> (Box2D, ShiftTarget) {
    let t_j = ShiftTarget::new(
        if cfg.sigma0 > 0.0 { Normal::new(0.0, cfg.sigma0).unwrap().sample(rng) } else { 0.0 },
        if cfg.sigma1 > 0.0 { Normal::new(0.0, cfg.sigma1).unwrap().sample(rng) } else { 0.0 },
    );
    (apply_shift(roi, &t_j), t_j)
}

/// Per-RoI minibatch label.
#[derive(Debug, Clone, PartialEq)]
pub enum RoiLabel {
    Foreground {
        /// Index into the scene's object list.
        object_index: usize,
        /// Refinement target toward the reference ground truth.
        reg_target: [f64; 4],
        /// Shift target toward the sensed ground truth; `None` for unpaired
        /// objects, which are excluded from the shift loss.
        shift_target: Option<ShiftTarget>,
    },
    Background,
    /// IoU between bg_thr and fg_thr: excluded from the minibatch.
    Ignored,
}

impl RoiLabel {
    pub fn is_foreground(&self) -> bool {
        matches!(self, RoiLabel::Foreground { .. })
    }
}

/// Assign foreground/background labels and regression / shift targets to
/// proposals. IoU is computed against reference-modality ground truth only,
/// so jitter applied to the sensed RoI can never flip a label.
pub fn assign_minibatch_labels(
    proposals: &[Proposal],
    objects: &[PairedObject],
    fg_thr: f64,
    bg_thr: f64,
) -> Result<Vec<RoiLabel>, RfaError> {
    if !(0.0 <= bg_thr && bg_thr <= fg_thr && fg_thr <= 1.0) {
        return Err(RfaError::InvalidThresholds { fg_thr, bg_thr });
    }
    let gt: Vec<(usize, &Box2D)> = objects
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.ref_box.as_ref().map(|b| (i, b)))
        .collect();
    Ok(proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (oi, b) in &gt {
                let v = p.roi.iou(b);
                if best.map(|(_, bv)| v > bv).unwrap_or(true) {
                    best = Some((*oi, v));
                }
            }
            match best {
                Some((oi, v)) if v >= fg_thr => {
                    let obj = &objects[oi];
                    let ref_gt = obj.ref_box.as_ref().expect("matched object has a ref box");
                    RoiLabel::Foreground {
                        object_index: oi,
                        reg_target: crate::detector::encode_box_deltas(&p.roi, ref_gt),
                        shift_target: obj
                            .sensed_box
                            .as_ref()
                            .map(|s| shift_targets(&p.roi, s)),
                    }
                }
                Some((_, v)) if v >= bg_thr => RoiLabel::Ignored,
                _ => RoiLabel::Background,
            }
        })
        .collect())
}

/// One RoI's classification term of the multi-task loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsTerm {
    pub logits: Vec<f64>,
    /// 0 = background, >= 1 = foreground class index.
    pub label: usize,
}

/// One RoI's box refinement term; only positives contribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegTerm {
    pub predicted: [f64; 4],
    pub target: [f64; 4],
    pub positive: bool,
}

/// The components of the multi-task loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_shift: f64,
    pub l_asc: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// Multi-task loss
/// `L = L_cls + lambda1 * L_shift + lambda2 * L_asc + L_reg`.
pub fn multi_task_loss(
    cls_terms: &[ClsTerm],
    shift_preds: &[ShiftPrediction],
    reg_terms: &[RegTerm],
    cfg: &LossConfig,
) -> Result<LossBreakdown, RfaError> {
    let labels: Vec<usize> = cls_terms.iter().map(|c| c.label).collect();
    let l_cls = if cls_terms.is_empty() {
        0.0
    } else {
        cls_terms
            .iter()
            .map(|c| softmax_cross_entropy(&Array1::from_vec(c.logits.clone()), c.label).0)
            .sum::<f64>()
            / cls_terms.len() as f64
    };
    let l_shift = shift_loss(shift_preds, &labels, cfg.smooth_l1_beta)?;
    let l_asc = asc_loss(shift_preds, &labels, cfg.smooth_l1_beta)?;
    let n_pos = reg_terms.iter().filter(|r| r.positive).count();
    let l_reg = if n_pos == 0 {
        0.0
    } else {
        reg_terms
            .iter()
            .filter(|r| r.positive)
            .map(|r| {
                (0..4)
                    .map(|k| smooth_l1(r.predicted[k] - r.target[k], cfg.smooth_l1_beta))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n_pos as f64
    };
    let total = l_cls + cfg.lambda1 * l_shift + cfg.lambda2 * l_asc + l_reg;
    Ok(LossBreakdown { l_cls, l_shift, l_asc, l_reg, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{central_diff, max_rel_error, DEFAULT_SCALE, DEFAULT_STEP};
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn pred(
        roi_index: usize,
        p: (f64, f64),
        t: Option<(f64, f64)>,
        nb: Option<(f64, f64)>,
    ) -> ShiftPrediction {
        ShiftPrediction {
            roi_index,
            predicted: ShiftTarget::new(p.0, p.1),
            target: t.map(|v| ShiftTarget::new(v.0, v.1)),
            neighbor_predicted: nb.map(|v| ShiftTarget::new(v.0, v.1)),
        }
    }

    #[test]
    fn zero_initialized_head_predicts_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let head = RfaHead::init(2 * 3 * 3, 8, Combiner::Sum, &mut rng);
        let a = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-2.0..2.0));
        let b = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-2.0..2.0));
        let t = head.predict(&a, &b).unwrap();
        assert_eq!((t.t_x, t.t_y), (0.0, 0.0));
    }

    #[test]
    fn head_rejects_shape_mismatch() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let head = RfaHead::init(2 * 3 * 3, 8, Combiner::Sum, &mut rng);
        let a = Array3::zeros((2, 3, 3));
        let b = Array3::zeros((2, 3, 2));
        assert!(matches!(head.predict(&a, &b), Err(RfaError::ShapeMismatch(..))));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        for combiner in [Combiner::Sum, Combiner::Concat] {
            let mut rng = ChaCha20Rng::seed_from_u64(5);
            let mut head = RfaHead::init(2 * 2 * 2, 6, combiner, &mut rng);
            // give the zero output layer some structure
            head.fc2 = Linear::he_init(6, 2, &mut rng);
            let a = Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(-1.0..1.0));
            let b = Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(-1.0..1.0));
            let d_shift = (0.7, -0.3);

            let (_, cache) = head.forward_train(&a, &b).unwrap();
            let (d_ref, d_sensed, grads) = head.backward(&cache, d_shift);

            let loss = |h: &RfaHead, a: &Array3<f64>, b: &Array3<f64>| {
                let t = h.predict(a, b).unwrap();
                d_shift.0 * t.t_x + d_shift.1 * t.t_y
            };

            let flat: Vec<f64> = a.iter().copied().collect();
            let num = central_diff(&flat, DEFAULT_STEP, |vals| {
                let av = Array3::from_shape_vec((2, 2, 2), vals.to_vec()).unwrap();
                loss(&head, &av, &b)
            });
            let an: Vec<f64> = d_ref.iter().copied().collect();
            assert!(max_rel_error(&an, &num, DEFAULT_SCALE) < 1e-6);

            let flat_b: Vec<f64> = b.iter().copied().collect();
            let num_b = central_diff(&flat_b, DEFAULT_STEP, |vals| {
                let bv = Array3::from_shape_vec((2, 2, 2), vals.to_vec()).unwrap();
                loss(&head, &a, &bv)
            });
            let an_b: Vec<f64> = d_sensed.iter().copied().collect();
            assert!(max_rel_error(&an_b, &num_b, DEFAULT_SCALE) < 1e-6);

            let wflat: Vec<f64> = head.fc1.weight.iter().copied().collect();
            let num_w = central_diff(&wflat, DEFAULT_STEP, |ws| {
                let mut h2 = head.clone();
                h2.fc1.weight =
                    ndarray::Array2::from_shape_vec(head.fc1.weight.raw_dim(), ws.to_vec())
                        .unwrap();
                loss(&h2, &a, &b)
            });
            let an_w: Vec<f64> = grads.fc1.weight.iter().copied().collect();
            assert!(max_rel_error(&an_w, &num_w, DEFAULT_SCALE) < 1e-6);
        }
    }

    #[test]
    fn shift_loss_hand_value_and_masking() {
        let labels = vec![1usize, 0];
        // one positive with residual (0.5, 0)
        let preds = vec![
            pred(0, (0.5, 0.0), Some((0.0, 0.0)), None),
            pred(1, (9.0, 9.0), Some((0.0, 0.0)), None), // background, masked
        ];
        let l = shift_loss(&preds, &labels, 1.0).unwrap();
        assert!((l - 0.125).abs() < 1e-12);

        // perfect predictions
        let perfect = vec![pred(0, (0.3, -0.2), Some((0.3, -0.2)), None)];
        assert_eq!(shift_loss(&perfect, &vec![1], 1.0).unwrap(), 0.0);

        // all background
        let bg = vec![pred(0, (1.0, 1.0), None, None)];
        assert_eq!(shift_loss(&bg, &vec![0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn shift_loss_errors_on_positive_without_target() {
        let preds = vec![pred(0, (0.5, 0.0), None, None)];
        assert_eq!(
            shift_loss(&preds, &vec![1], 1.0),
            Err(RfaError::MissingTarget { roi_index: 0 })
        );
    }

    #[test]
    fn shift_loss_gradient_matches_finite_differences() {
        let labels = vec![1usize, 1, 0];
        let preds = vec![
            pred(0, (0.4, -0.9), Some((0.1, 0.2)), None),
            pred(1, (2.0, 0.3), Some((-0.5, 0.3)), None),
            pred(2, (1.0, 1.0), Some((0.0, 0.0)), None),
        ];
        let grads = shift_loss_grads(&preds, &labels, 1.0).unwrap();
        let flat: Vec<f64> = preds
            .iter()
            .flat_map(|p| [p.predicted.t_x, p.predicted.t_y])
            .collect();
        let num = central_diff(&flat, DEFAULT_STEP, |vals| {
            let ps: Vec<ShiftPrediction> = preds
                .iter()
                .enumerate()
                .map(|(i, p)| ShiftPrediction {
                    predicted: ShiftTarget::new(vals[2 * i], vals[2 * i + 1]),
                    ..*p
                })
                .collect();
            shift_loss(&ps, &labels, 1.0).unwrap()
        });
        let an: Vec<f64> = grads.iter().flat_map(|g| [g.0, g.1]).collect();
        assert!(max_rel_error(&an, &num, DEFAULT_SCALE) < 1e-6);
    }

    #[test]
    fn asc_pair_offsets_and_distribution() {
        let roi = Box2D::new(20.0, 20.0, 8.0, 8.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let nb = asc_pair(&roi, 4, &mut rng);
            let (dx, dy) = (nb.x - roi.x, nb.y - roi.y);
            assert_eq!((nb.w, nb.h), (roi.w, roi.h));
            match (dx as i64, dy as i64) {
                (4, 0) => counts[0] += 1,
                (-4, 0) => counts[1] += 1,
                (0, 4) => counts[2] += 1,
                (0, -4) => counts[3] += 1,
                other => panic!("unexpected neighbour offset {other:?}"),
            }
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.02, "neighbour frequency {freq}");
        }
    }

    #[test]
    fn asc_loss_zero_when_neighbors_match_target() {
        let labels = vec![1usize];
        let preds = vec![pred(0, (0.2, 0.1), Some((0.2, 0.1)), Some((0.2, 0.1)))];
        assert_eq!(asc_loss(&preds, &labels, 1.0).unwrap(), 0.0);
        assert_eq!(shift_loss(&preds, &labels, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn jitter_zero_sigma_is_identity() {
        let roi = Box2D::new(30.0, 40.0, 12.0, 10.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (j, t) = roi_jitter(&roi, &JitterConfig { sigma0: 0.0, sigma1: 0.0 }, &mut rng);
        assert_eq!(j, roi);
        assert_eq!(t, ShiftTarget::ZERO);
    }

    #[test]
    fn jitter_composition_recovers_unjittered_alignment() {
        let roi = Box2D::new(30.0, 40.0, 12.0, 10.0).unwrap();
        let target = ShiftTarget::new(0.31, -0.17);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (jittered, t_j) = roi_jitter(&roi, &JitterConfig::default(), &mut rng);
            let enriched = target.minus(&t_j);
            let a = apply_shift(&jittered, &enriched);
            let b = apply_shift(&roi, &target);
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
    }

    #[test]
    fn jitter_default_sigma_is_per_paper_default() {
        let cfg = JitterConfig::default();
        assert_eq!((cfg.sigma0, cfg.sigma1), (0.05, 0.05));
    }

    #[test]
    fn assignment_matches_spec_examples() {
        use crate::paired::{Occlusion, PairedObject};
        let ref_gt = Box2D::new(20.0, 20.0, 10.0, 10.0).unwrap();
        let sensed_gt = Box2D::new(23.0, 19.0, 10.0, 10.0).unwrap();
        let objects = vec![
            PairedObject {
                pair_id: 0,
                class_label: "disc".into(),
                ref_box: Some(ref_gt),
                sensed_box: Some(sensed_gt),
                unpaired: false,
                occlusion: Occlusion::None,
                truncated: false,
                depth_patch: None,
                box3d: None,
            },
            PairedObject {
                pair_id: 1,
                class_label: "disc".into(),
                ref_box: Some(Box2D::new(50.0, 50.0, 10.0, 10.0).unwrap()),
                sensed_box: None,
                unpaired: true,
                occlusion: Occlusion::None,
                truncated: false,
                depth_patch: None,
                box3d: None,
            },
        ];
        let proposals = vec![
            Proposal { roi: ref_gt, objectness: 0.9 },
            Proposal { roi: Box2D::new(5.0, 5.0, 6.0, 6.0).unwrap(), objectness: 0.3 },
            Proposal { roi: Box2D::new(50.0, 50.0, 10.0, 10.0).unwrap(), objectness: 0.8 },
        ];
        let labels = assign_minibatch_labels(&proposals, &objects, 0.5, 0.5).unwrap();
        match &labels[0] {
            RoiLabel::Foreground { object_index, reg_target, shift_target } => {
                assert_eq!(*object_index, 0);
                assert!(reg_target.iter().all(|v| v.abs() < 1e-12));
                let t = shift_target.unwrap();
                // the pair's canonical shift: (23-20)/10, (19-20)/10
                assert!((t.t_x - 0.3).abs() < 1e-12);
                assert!((t.t_y - -0.1).abs() < 1e-12);
            }
            other => panic!("expected foreground, got {other:?}"),
        }
        assert_eq!(labels[1], RoiLabel::Background);
        match &labels[2] {
            RoiLabel::Foreground { object_index, shift_target, .. } => {
                assert_eq!(*object_index, 1);
                assert!(shift_target.is_none()); // unpaired: excluded from N_shift
            }
            other => panic!("expected foreground, got {other:?}"),
        }
    }

    #[test]
    fn assignment_rejects_bad_thresholds() {
        assert!(matches!(
            assign_minibatch_labels(&[], &[], 0.4, 0.6),
            Err(RfaError::InvalidThresholds { .. })
        ));
    }

    #[test]
    fn multi_task_loss_degenerate_weights_reduce_to_fast_rcnn_form() {
        let cls = vec![
            ClsTerm { logits: vec![0.1, 2.0], label: 1 },
            ClsTerm { logits: vec![1.5, -0.3], label: 0 },
        ];
        let preds = vec![pred(0, (0.4, 0.1), Some((0.0, 0.0)), Some((0.2, 0.0)))];
        let reg = vec![RegTerm {
            predicted: [0.1, 0.0, 0.0, 0.0],
            target: [0.0; 4],
            positive: true,
        }];
        let cfg = LossConfig { lambda1: 0.0, lambda2: 0.0, ..Default::default() };
        let out = multi_task_loss(&cls, &preds, &reg, &cfg).unwrap();
        assert!(out.l_shift > 0.0 && out.l_asc > 0.0);
        assert!((out.total - (out.l_cls + out.l_reg)).abs() < 1e-12);

        // default weights include the shift terms
        let full = multi_task_loss(&cls, &preds, &reg, &LossConfig::default()).unwrap();
        let expected = full.l_cls + 0.75 * full.l_shift + 0.25 * full.l_asc + full.l_reg;
        assert!((full.total - expected).abs() < 1e-12);
    }

    #[test]
    fn multi_task_loss_perfect_predictions() {
        // confident correct classifications and perfect regressions
        let cls = vec![
            ClsTerm { logits: vec![-20.0, 20.0], label: 1 },
            ClsTerm { logits: vec![20.0, -20.0], label: 0 },
        ];
        let preds = vec![pred(0, (0.3, 0.2), Some((0.3, 0.2)), Some((0.3, 0.2)))];
        let reg = vec![RegTerm { predicted: [0.0; 4], target: [0.0; 4], positive: true }];
        let out = multi_task_loss(&cls, &preds, &reg, &LossConfig::default()).unwrap();
        assert_eq!(out.l_shift, 0.0);
        assert_eq!(out.l_asc, 0.0);
        assert_eq!(out.l_reg, 0.0);
        assert!(out.l_cls < 1e-8); // entropy floor of confident predictions
    }
}
