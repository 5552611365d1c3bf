//! Position-shift robustness protocols: shift-sweep surfaces, degradation
//! rates, weakly-aligned bounds, and the directional statistics table.

use serde::{Deserialize, Serialize};

use crate::detector::{detect, DetectionResult, DetectorModel};
use crate::paired::{shift_image, ScenePair};

use super::map::{mean_average_precision, MapDims};
use super::miss_rate::{modality_mr, EvalFilter, Modality};
use super::EvalError;

/// Which metric a sweep or evaluation reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    /// Log-average miss rate against reference-modality boxes.
    Mr,
    /// Explicit reference-modality miss rate (same computation as `Mr`).
    MrRef,
    /// Miss rate against sensed-modality boxes.
    MrSensed,
    Map2d,
    Map3d,
}

impl MetricKind {
    pub fn higher_is_better(&self) -> bool {
        matches!(self, MetricKind::Map2d | MetricKind::Map3d)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Mr => "mr",
            MetricKind::MrRef => "mr-ref",
            MetricKind::MrSensed => "mr-sensed",
            MetricKind::Map2d => "map2d",
            MetricKind::Map3d => "map3d",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mr" => Ok(MetricKind::Mr),
            "mr-ref" => Ok(MetricKind::MrRef),
            "mr-sensed" => Ok(MetricKind::MrSensed),
            "map2d" => Ok(MetricKind::Map2d),
            "map3d" => Ok(MetricKind::Map3d),
            other => Err(format!(
                "unknown metric {other:?} (expected mr, mr-ref, mr-sensed, map2d, map3d)"
            )),
        }
    }
}

/// Run the detector over a dataset, in parallel across scenes.
pub fn detect_dataset(
    model: &DetectorModel,
    scenes: &[ScenePair],
    threshold: f64,
    workers: usize,
) -> Result<Vec<Vec<DetectionResult>>, EvalError> {
    let results = crate::par::map_slice(scenes, workers, |s| detect(s, model, threshold));
    results
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(EvalError::from)
}

/// Score a set of per-scene detections with the chosen metric.
pub fn score_detections(
    detections: &[Vec<DetectionResult>],
    scenes: &[ScenePair],
    metric: MetricKind,
    filter: &EvalFilter,
) -> Result<f64, EvalError> {
    match metric {
        MetricKind::Mr | MetricKind::MrRef => {
            modality_mr(detections, scenes, Modality::Reference, filter, 0.5)
        }
        MetricKind::MrSensed => {
            modality_mr(detections, scenes, Modality::Sensed, filter, 0.5)
        }
        MetricKind::Map2d => mean_average_precision(detections, scenes, 0.5, MapDims::TwoD),
        MetricKind::Map3d => {
            mean_average_precision(detections, scenes, 0.25, MapDims::ThreeD)
        }
    }
}

/// Evaluate a model on a dataset shifted by `(dx, dy)` pixels on the sensed
/// side.
pub fn evaluate_shifted(
    model: &DetectorModel,
    scenes: &[ScenePair],
    shift: (i32, i32),
    metric: MetricKind,
    filter: &EvalFilter,
    threshold: f64,
    workers: usize,
) -> Result<f64, EvalError> {
    let shifted: Vec<ScenePair> = if shift == (0, 0) {
        scenes.to_vec()
    } else {
        scenes.iter().map(|s| shift_image(s, shift)).collect()
    };
    let detections = detect_dataset(model, &shifted, threshold, workers)?;
    score_detections(&detections, &shifted, metric, filter)
}

/// One entry of a shift-sweep surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub dx: i32,
    pub dy: i32,
    pub value: f64,
    /// Degradation rate against the origin entry, when the origin metric is
    /// nonzero.
    pub degradation: Option<f64>,
}

/// The full integer grid `{-max..=max}^2` (169 patterns for max = 6).
pub fn grid_shift_set(max: i32) -> Vec<(i32, i32)> {
    let mut out = Vec::with_capacity(((2 * max + 1) * (2 * max + 1)) as usize);
    for dy in -max..=max {
        for dx in -max..=max {
            out.push((dx, dy));
        }
    }
    out
}

/// Evaluate the metric at every shift pattern; parallel across patterns.
pub fn robustness_sweep(
    model: &DetectorModel,
    scenes: &[ScenePair],
    shift_set: &[(i32, i32)],
    metric: MetricKind,
    filter: &EvalFilter,
    threshold: f64,
    workers: usize,
) -> Result<Vec<SweepPoint>, EvalError> {
    let origin = evaluate_shifted(model, scenes, (0, 0), metric, filter, threshold, 1)?;
    let values = crate::par::map_slice(shift_set, workers, |&(dx, dy)| {
        evaluate_shifted(model, scenes, (dx, dy), metric, filter, threshold, 1)
            .map(|value| (dx, dy, value))
    });
    values
        .into_iter()
        .map(|r| {
            r.map(|(dx, dy, value)| SweepPoint {
                dx,
                dy,
                value,
                degradation: degradation_rate(origin, value, metric).ok(),
            })
        })
        .collect()
}

/// Performance degradation rate: positive iff performance worsened.
/// For miss-rate metrics `(degraded - original) / original`; for mAP
/// metrics `(original - degraded) / original`.
pub fn degradation_rate(
    original: f64,
    degraded: f64,
    metric: MetricKind,
) -> Result<f64, EvalError> {
    if original <= 0.0 {
        return Err(EvalError::ZeroOriginalMetric);
    }
    Ok(if metric.higher_is_better() {
        (original - degraded) / original
    } else {
        (degraded - original) / original
    })
}

/// Degradation that tolerates a zero original metric: no change means no
/// degradation, any worsening from a perfect score is unbounded.
fn degradation_for_bound(original: f64, degraded: f64, metric: MetricKind) -> f64 {
    if original > 0.0 {
        degradation_rate(original, degraded, metric).expect("original > 0")
    } else {
        let worsened = if metric.higher_is_better() { degraded < 0.0 } else { degraded > 0.0 };
        if worsened {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

/// Shift directions of the directional protocol, as integer step vectors on
/// the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirAngle {
    Deg0,
    Deg45,
    Deg90,
    Deg135,
}

impl DirAngle {
    pub fn all() -> [DirAngle; 4] {
        [DirAngle::Deg0, DirAngle::Deg45, DirAngle::Deg90, DirAngle::Deg135]
    }

    /// One integer step along the direction.
    pub fn step(&self) -> (i32, i32) {
        match self {
            DirAngle::Deg0 => (1, 0),
            DirAngle::Deg45 => (1, 1),
            DirAngle::Deg90 => (0, 1),
            DirAngle::Deg135 => (-1, 1),
        }
    }

    pub fn degrees(&self) -> u32 {
        match self {
            DirAngle::Deg0 => 0,
            DirAngle::Deg45 => 45,
            DirAngle::Deg90 => 90,
            DirAngle::Deg135 => 135,
        }
    }
}

/// Outcome of a weakly-aligned bound search along one direction sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bound {
    /// Degradation reached 50% at this many steps.
    Within { steps: u32 },
    /// Not reached within the search range.
    Beyond { max: u32 },
}

impl Bound {
    /// The magnitude used by the directional design.
    pub fn magnitude(&self) -> u32 {
        match self {
            Bound::Within { steps } => *steps,
            Bound::Beyond { max } => *max,
        }
    }
}

/// Weakly-aligned bounds along one direction: the smallest step count, per
/// sign, at which the degradation rate reaches 0.5. Linear scan from the
/// origin outward.
pub fn weak_aligned_bound(
    model: &DetectorModel,
    scenes: &[ScenePair],
    angle: DirAngle,
    max_px: u32,
    metric: MetricKind,
    filter: &EvalFilter,
    threshold: f64,
    workers: usize,
) -> Result<(Bound, Bound), EvalError> {
    let origin = evaluate_shifted(model, scenes, (0, 0), metric, filter, threshold, workers)?;
    let (sx, sy) = angle.step();
    let mut bounds = [Bound::Beyond { max: max_px }, Bound::Beyond { max: max_px }];
    for (slot, sign) in [(0usize, 1i32), (1, -1)] {
        for k in 1..=max_px {
            let shift = (sign * sx * k as i32, sign * sy * k as i32);
            let value =
                evaluate_shifted(model, scenes, shift, metric, filter, threshold, workers)?;
            if degradation_for_bound(origin, value, metric) >= 0.5 {
                bounds[slot] = Bound::Within { steps: k };
                break;
            }
        }
    }
    Ok((bounds[0], bounds[1]))
}

/// The ten shift modes of one direction: five per sign, equally spaced
/// between the origin and the bound, rounded to integer steps. Duplicates
/// after rounding are kept so the design always has ten points.
pub fn directional_shift_modes(angle: DirAngle, bounds: (Bound, Bound)) -> Vec<(i32, i32)> {
    let (sx, sy) = angle.step();
    let mut out = Vec::with_capacity(10);
    for (bound, sign) in [(bounds.0, 1i32), (bounds.1, -1)] {
        let b = bound.magnitude() as f64;
        for i in 1..=5u32 {
            let m = (i as f64 * b / 5.0).round() as i32;
            out.push((sign * sx * m, sign * sy * m));
        }
    }
    out
}

/// Directional robustness statistics: the metric at the origin plus the
/// mean and population standard deviation over the ten shift modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalStats {
    pub angle_deg: u32,
    pub origin: f64,
    pub mean: f64,
    pub std_dev: f64,
    pub points: Vec<SweepPoint>,
}

pub fn directional_stats(
    model: &DetectorModel,
    scenes: &[ScenePair],
    angle: DirAngle,
    bounds: (Bound, Bound),
    metric: MetricKind,
    filter: &EvalFilter,
    threshold: f64,
    workers: usize,
) -> Result<DirectionalStats, EvalError> {
    let origin = evaluate_shifted(model, scenes, (0, 0), metric, filter, threshold, workers)?;
    let modes = directional_shift_modes(angle, bounds);
    let values = crate::par::map_slice(&modes, workers, |&(dx, dy)| {
        evaluate_shifted(model, scenes, (dx, dy), metric, filter, threshold, 1)
            .map(|v| (dx, dy, v))
    });
    let mut points = Vec::with_capacity(modes.len());
    for r in values {
        let (dx, dy, value) = r?;
        points.push(SweepPoint {
            dx,
            dy,
            value,
            degradation: degradation_rate(origin, value, metric).ok(),
        });
    }
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.value).sum::<f64>() / n;
    let var = points.iter().map(|p| (p.value - mean).powi(2)).sum::<f64>() / n;
    Ok(DirectionalStats {
        angle_deg: angle.degrees(),
        origin,
        mean,
        std_dev: var.sqrt(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degradation_rate_matches_reported_example() {
        // 15.2 -> 25.1 miss rate is ~65% relative degradation
        let r = degradation_rate(15.2, 25.1, MetricKind::Mr).unwrap();
        assert!((r - 0.651).abs() < 1e-3, "got {r}");
    }

    #[test]
    fn degradation_rate_handles_both_conventions() {
        assert_eq!(degradation_rate(0.4, 0.4, MetricKind::Mr).unwrap(), 0.0);
        assert_eq!(degradation_rate(40.0, 20.0, MetricKind::Map2d).unwrap(), 0.5);
        assert!(degradation_rate(0.0, 0.5, MetricKind::Mr).is_err());
        // sign convention: positive iff worse
        assert!(degradation_rate(0.2, 0.3, MetricKind::Mr).unwrap() > 0.0);
        assert!(degradation_rate(0.3, 0.2, MetricKind::Mr).unwrap() < 0.0);
        assert!(degradation_rate(0.5, 0.4, MetricKind::Map2d).unwrap() > 0.0);
    }

    #[test]
    fn grid_has_169_patterns_for_max_6() {
        let grid = grid_shift_set(6);
        assert_eq!(grid.len(), 169);
        assert!(grid.contains(&(-6, 6)));
        assert!(grid.contains(&(0, 0)));
    }

    #[test]
    fn directional_modes_match_spacing_rule() {
        // bound 10 on both sides: 2, 4, 6, 8, 10 per side
        let modes = directional_shift_modes(
            DirAngle::Deg0,
            (Bound::Within { steps: 10 }, Bound::Within { steps: 10 }),
        );
        let xs: Vec<i32> = modes.iter().map(|m| m.0).collect();
        assert_eq!(xs, vec![2, 4, 6, 8, 10, -2, -4, -6, -8, -10]);
        assert!(modes.iter().all(|m| m.1 == 0));
    }

    #[test]
    fn directional_modes_keep_duplicates_after_rounding() {
        let modes = directional_shift_modes(
            DirAngle::Deg90,
            (Bound::Within { steps: 2 }, Bound::Within { steps: 2 }),
        );
        assert_eq!(modes.len(), 10);
        // magnitudes round(0.4), round(0.8), ... = 0, 1, 1, 2, 2
        let ys: Vec<i32> = modes.iter().take(5).map(|m| m.1).collect();
        assert_eq!(ys, vec![0, 1, 1, 2, 2]);
    }

    #[test]
    fn diagonal_angles_step_both_axes() {
        assert_eq!(DirAngle::Deg45.step(), (1, 1));
        assert_eq!(DirAngle::Deg135.step(), (-1, 1));
        let modes = directional_shift_modes(
            DirAngle::Deg135,
            (Bound::Within { steps: 5 }, Bound::Beyond { max: 5 }),
        );
        assert_eq!(modes[4], (-5, 5));
        assert_eq!(modes[9], (5, -5));
    }
}
