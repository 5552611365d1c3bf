//! Axis-aligned box arithmetic, IoU, and the shift-target encoding that the
//! alignment machinery is built on.
//!
//! Boxes are stored center-form `(x, y, w, h)`; corner-form conversion is
//! provided for I/O. A [`ShiftTarget`] is the dimensionless displacement of a
//! sensed region relative to a reference region, normalized by the reference
//! width and height.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box: w={w}, h={h} (both must be positive and finite)")]
    InvalidBox { w: f64, h: f64 },
    #[error("invalid extent: {width}x{height}")]
    InvalidExtent { width: usize, height: usize },
}

/// Image extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub width: usize,
    pub height: usize,
}

impl Extent {
    pub fn new(width: usize, height: usize) -> Self {
        Extent { width, height }
    }

    /// Whether a box lies fully inside `[0, width] x [0, height]`.
    pub fn contains(&self, b: &Box2D) -> bool {
        let (x0, y0, x1, y1) = b.corners();
        x0 >= 0.0 && y0 >= 0.0 && x1 <= self.width as f64 && y1 <= self.height as f64
    }
}

/// Axis-aligned 2-D box in center form: `(x, y)` center, `(w, h)` size, pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let b = Box2D { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Build from corner form `(x0, y0, x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        let w = x1 - x0;
        let h = y1 - y0;
        Box2D::new(x0 + w / 2.0, y0 + h / 2.0, w, h)
    }

    /// Corner form `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite =
            self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite();
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(GeometryError::InvalidBox { w: self.w, h: self.h });
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    /// Overlap area with another box; 0 for disjoint or touching boxes.
    pub fn intersection_area(&self, other: &Box2D) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = ax1.min(bx1) - ax0.max(bx0);
        let ih = ay1.min(by1) - ay0.max(by0);
        if iw > 0.0 && ih > 0.0 {
            iw * ih
        } else {
            0.0
        }
    }

    /// IoU against another box. Both boxes are assumed valid; use the checked
    /// free function [`iou`] on unvalidated input.
    pub fn iou(&self, other: &Box2D) -> f64 {
        debug_assert!(self.validate().is_ok() && other.validate().is_ok());
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Translate the center by `(dx, dy)` pixels, keeping the size.
    pub fn translated(&self, dx: f64, dy: f64) -> Box2D {
        Box2D { x: self.x + dx, y: self.y + dy, ..*self }
    }
}

/// Dimensionless displacement of a sensed region relative to a reference
/// region: `t_x` in units of the reference width, `t_y` of its height.
/// Values are unclamped; pathological pairs may exceed +-1.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShiftTarget {
    pub t_x: f64,
    pub t_y: f64,
}

impl ShiftTarget {
    pub fn new(t_x: f64, t_y: f64) -> Self {
        ShiftTarget { t_x, t_y }
    }

    pub const ZERO: ShiftTarget = ShiftTarget { t_x: 0.0, t_y: 0.0 };

    /// Component-wise difference, used when composing jitter with a target.
    pub fn minus(&self, other: &ShiftTarget) -> ShiftTarget {
        ShiftTarget { t_x: self.t_x - other.t_x, t_y: self.t_y - other.t_y }
    }
}

/// Intersection over union of two boxes, validating both.
pub fn iou(a: &Box2D, b: &Box2D) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

/// Normalized displacement carrying the `sensed` center onto the `reference`
/// frame: `t_x = (x_s - x_r) / w_r`, `t_y = (y_s - y_r) / h_r`.
pub fn shift_targets(reference: &Box2D, sensed: &Box2D) -> ShiftTarget {
    debug_assert!(reference.w > 0.0 && reference.h > 0.0);
    ShiftTarget {
        t_x: (sensed.x - reference.x) / reference.w,
        t_y: (sensed.y - reference.y) / reference.h,
    }
}

/// Inverse of [`shift_targets`]: displace `roi`'s center by `t` in units of
/// the roi's own size, keeping `w` and `h`.
pub fn apply_shift(roi: &Box2D, t: &ShiftTarget) -> Box2D {
    Box2D {
        x: roi.x + t.t_x * roi.w,
        y: roi.y + t.t_y * roi.h,
        w: roi.w,
        h: roi.h,
    }
}

/// Scale a RoI about its center by `context_factor`, then clip to the image
/// bounds. Clipping may move the center. Output size is floored at a tiny
/// positive sliver so the box stays valid even for degenerate input.
pub fn enlarge_roi(roi: &Box2D, context_factor: f64, image_bounds: Extent) -> Box2D {
    debug_assert!(context_factor >= 1.0, "context_factor should be >= 1");
    let w = roi.w * context_factor;
    let h = roi.h * context_factor;
    let (bw, bh) = (image_bounds.width as f64, image_bounds.height as f64);
    let x0 = roi.x - w / 2.0;
    let y0 = roi.y - h / 2.0;
    let x1 = roi.x + w / 2.0;
    let y1 = roi.y + h / 2.0;
    if x0 >= 0.0 && y0 >= 0.0 && x1 <= bw && y1 <= bh {
        // no clipping: keep the center untouched
        return Box2D { x: roi.x, y: roi.y, w, h };
    }
    let (cx0, cy0) = (x0.max(0.0), y0.max(0.0));
    let (cx1, cy1) = (x1.min(bw), y1.min(bh));
    let min_side = 1e-6;
    let cw = (cx1 - cx0).max(min_side);
    let ch = (cy1 - cy0).max(min_side);
    Box2D { x: cx0 + cw / 2.0, y: cy0 + ch / 2.0, w: cw, h: ch }
}

/// Default RoI context enlargement used by the alignment module.
pub const DEFAULT_CONTEXT_FACTOR: f64 = 1.5;
