//! Metrics and robustness protocols: log-average miss rate (with modality
//! variants), mean average precision (2-D and 3-D), shift-sweep surfaces,
//! degradation rates, weakly-aligned bounds, and directional statistics.

mod iou3d;
mod map;
mod miss_rate;
mod sweep;

pub use iou3d::iou_3d;
pub use map::{mean_average_precision, MapDims};
pub use miss_rate::{
    fppi_reference_points, log_average_miss_rate, match_scene, modality_gt, modality_mr,
    mr_curve, EvalFilter, GtBox, MatchFlag, Modality, MrCurvePoint,
};
pub use sweep::{
    degradation_rate, detect_dataset, directional_shift_modes, directional_stats,
    evaluate_shifted, grid_shift_set, robustness_sweep, score_detections, weak_aligned_bound,
    Bound, DirAngle, DirectionalStats, MetricKind, SweepPoint,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no (non-ignored) ground truth in the evaluation set")]
    NoGroundTruth,
    #[error("degradation rate undefined: original metric is zero")]
    ZeroOriginalMetric,
    #[error("3-D evaluation needs 3-D boxes: {0}")]
    Missing3d(String),
    #[error(transparent)]
    Model(#[from] crate::detector::ModelError),
}

pub const EVAL_REPORT_SCHEMA_VERSION: u32 = 1;

/// Weakly-aligned bounds along one direction, both signs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakBoundReport {
    pub angle_deg: u32,
    pub positive: Bound,
    pub negative: Bound,
}

/// The metric bundle a CLI run emits as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub metric: Option<MetricKind>,
    pub n_scenes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mr_ref: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mr_sensed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map2d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map3d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mr_curve: Option<Vec<MrCurvePoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift_surface: Option<Vec<SweepPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directional: Option<Vec<DirectionalStats>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weak_bounds: Option<Vec<WeakBoundReport>>,
}

impl EvalReport {
    pub fn new(metric: Option<MetricKind>, n_scenes: usize) -> Self {
        EvalReport {
            schema_version: EVAL_REPORT_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            metric,
            n_scenes,
            ..Default::default()
        }
    }

    /// Store a headline metric value under its own field.
    pub fn set_metric_value(&mut self, metric: MetricKind, value: f64) {
        match metric {
            MetricKind::Mr => self.mr = Some(value),
            MetricKind::MrRef => self.mr_ref = Some(value),
            MetricKind::MrSensed => self.mr_sensed = Some(value),
            MetricKind::Map2d => self.map2d = Some(value),
            MetricKind::Map3d => self.map3d = Some(value),
        }
    }

    pub fn metric_value(&self, metric: MetricKind) -> Option<f64> {
        match metric {
            MetricKind::Mr => self.mr,
            MetricKind::MrRef => self.mr_ref,
            MetricKind::MrSensed => self.mr_sensed,
            MetricKind::Map2d => self.map2d,
            MetricKind::Map3d => self.map3d,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_through_json() {
        let mut report = EvalReport::new(Some(MetricKind::Mr), 12);
        report.set_metric_value(MetricKind::Mr, 0.25);
        report.weak_bounds = Some(vec![WeakBoundReport {
            angle_deg: 0,
            positive: Bound::Within { steps: 4 },
            negative: Bound::Beyond { max: 10 },
        }]);
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
    }
}
