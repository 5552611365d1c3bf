//! Confidence-aware fusion: per-modality confidence weights, a cross-modal
//! disagreement weight, and region-feature re-weighting ahead of the final
//! detection head.
//!
//! Each modality gets an auxiliary two-way classifier over its pooled region
//! feature; the absolute probability margin `|p1 - p0|` is that modality's
//! confidence. When the two modalities contradict each other the sensed
//! branch is additionally suppressed by `1 - |p1_ref - p1_sensed|` (the
//! reference modality is the trusted anchor and keeps its weight).

use ndarray::Array3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CafError {
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("probabilities do not sum to 1: p1={p1}, p0={p0}")]
    NotNormalized { p1: f64, p0: f64 },
    #[error("region feature shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
}

fn check_prob(p: f64) -> Result<(), CafError> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(CafError::InvalidProbability(p));
    }
    Ok(())
}

/// Confidence of one modality: the margin between its foreground and
/// background probabilities.
pub fn modality_confidence(p1: f64, p0: f64) -> Result<f64, CafError> {
    check_prob(p1)?;
    check_prob(p0)?;
    if (p1 + p0 - 1.0).abs() > 1e-6 {
        return Err(CafError::NotNormalized { p1, p0 });
    }
    Ok((p1 - p0).abs())
}

/// Cross-modal agreement: 1 when both modalities predict the same foreground
/// probability, approaching 0 under contradiction.
pub fn disagreement_weight(p1_ref: f64, p1_sensed: f64) -> Result<f64, CafError> {
    check_prob(p1_ref)?;
    check_prob(p1_sensed)?;
    Ok(1.0 - (p1_ref - p1_sensed).abs())
}

/// Per-RoI fusion weights derived from the two auxiliary classifiers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceWeights {
    pub w_ref: f64,
    pub w_sensed: f64,
    pub w_disagree: f64,
    pub p1_ref: f64,
    pub p0_ref: f64,
    pub p1_sensed: f64,
    pub p0_sensed: f64,
}

impl ConfidenceWeights {
    pub fn from_probs(
        p1_ref: f64,
        p0_ref: f64,
        p1_sensed: f64,
        p0_sensed: f64,
    ) -> Result<Self, CafError> {
        Ok(ConfidenceWeights {
            w_ref: modality_confidence(p1_ref, p0_ref)?,
            w_sensed: modality_confidence(p1_sensed, p0_sensed)?,
            w_disagree: disagreement_weight(p1_ref, p1_sensed)?,
            p1_ref,
            p0_ref,
            p1_sensed,
            p0_sensed,
        })
    }

    /// Effective multiplier on the sensed branch.
    pub fn sensed_multiplier(&self) -> f64 {
        self.w_sensed * self.w_disagree
    }
}

/// Re-weight and combine region features:
/// `fused = w_ref * rf_ref + w_sensed * w_disagree * rf_sensed_aligned`.
pub fn reweight_fuse(
    rf_ref: &Array3<f64>,
    rf_sensed_aligned: &Array3<f64>,
    w: &ConfidenceWeights,
) -> Result<Array3<f64>, CafError> {
    if rf_ref.dim() != rf_sensed_aligned.dim() {
        return Err(CafError::ShapeMismatch(rf_ref.dim(), rf_sensed_aligned.dim()));
    }
    let s = w.sensed_multiplier();
    Ok(rf_ref * w.w_ref + rf_sensed_aligned * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn confidence_edge_and_hand_values() {
        assert_eq!(modality_confidence(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(modality_confidence(1.0, 0.0).unwrap(), 1.0);
        let v = modality_confidence(0.9, 0.1).unwrap();
        assert!((v - 0.8).abs() < 1e-12);
    }

    #[test]
    fn confidence_rejects_bad_probabilities() {
        assert!(modality_confidence(1.2, -0.2).is_err());
        assert!(matches!(
            modality_confidence(0.7, 0.7),
            Err(CafError::NotNormalized { .. })
        ));
    }

    #[test]
    fn disagreement_hand_values() {
        assert_eq!(disagreement_weight(0.42, 0.42).unwrap(), 1.0);
        let v = disagreement_weight(0.9, 0.1).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
    }

    #[test]
    fn disagreement_same_on_either_class_probability() {
        // 1 - |p1_r - p1_s| == 1 - |p0_r - p0_s| since p0 = 1 - p1
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p1r: f64 = rng.gen();
            let p1s: f64 = rng.gen();
            let a = disagreement_weight(p1r, p1s).unwrap();
            let b = disagreement_weight(1.0 - p1r, 1.0 - p1s).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_stay_in_unit_interval_and_swap_consistently() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p1r: f64 = rng.gen();
            let p1s: f64 = rng.gen();
            let w = ConfidenceWeights::from_probs(p1r, 1.0 - p1r, p1s, 1.0 - p1s).unwrap();
            for v in [w.w_ref, w.w_sensed, w.w_disagree] {
                assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            let swapped =
                ConfidenceWeights::from_probs(p1s, 1.0 - p1s, p1r, 1.0 - p1r).unwrap();
            assert!((w.w_ref - swapped.w_sensed).abs() < 1e-12);
            assert!((w.w_sensed - swapped.w_ref).abs() < 1e-12);
            assert!((w.w_disagree - swapped.w_disagree).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sensed_multiplier_suppresses_sensed_features_exactly() {
        let rf_ref = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y + x) as f64 * 0.1);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-5.0..5.0));
        let b = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-5.0..5.0));
        // w_sensed = 0 via p1 = p0 = 0.5
        let w = ConfidenceWeights::from_probs(0.9, 0.1, 0.5, 0.5).unwrap();
        assert_eq!(w.sensed_multiplier(), 0.0);
        let fa = reweight_fuse(&rf_ref, &a, &w).unwrap();
        let fb = reweight_fuse(&rf_ref, &b, &w).unwrap();
        assert_eq!(fa, fb); // bit-exact invariance to the sensed values
    }

    #[test]
    fn contradictory_predictions_attenuate_sensed_five_fold() {
        // unpaired-object situation: the modalities contradict each other
        let w = ConfidenceWeights::from_probs(0.9, 0.1, 0.1, 0.9).unwrap();
        assert!((w.w_disagree - 0.2).abs() < 1e-12);
        let agree = ConfidenceWeights::from_probs(0.9, 0.1, 0.9, 0.1).unwrap();
        let ratio = agree.sensed_multiplier() / w.sensed_multiplier();
        assert!((ratio - 5.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric_inputs_fuse_symmetrically() {
        let f = Array3::from_shape_fn((1, 2, 2), |(_, y, x)| (y * 2 + x) as f64);
        let w = ConfidenceWeights::from_probs(0.8, 0.2, 0.8, 0.2).unwrap();
        let ab = reweight_fuse(&f, &f, &w).unwrap();
        // swapping modalities with equal weights leaves the fusion unchanged
        let swapped = ConfidenceWeights::from_probs(0.8, 0.2, 0.8, 0.2).unwrap();
        let ba = reweight_fuse(&f, &f, &swapped).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn fuse_rejects_shape_mismatch() {
        let a = Array3::<f64>::zeros((1, 2, 2));
        let b = Array3::<f64>::zeros((1, 3, 2));
        let w = ConfidenceWeights::from_probs(0.8, 0.2, 0.8, 0.2).unwrap();
        assert!(matches!(reweight_fuse(&a, &b, &w), Err(CafError::ShapeMismatch(..))));
    }
}
