//! 3-D bounding-box initialization from 2-D proposals, seven-entry target
//! encoding/decoding, and the 3-D regression loss.
//!
//! A [`Box3D`] is the camera-frame centroid, metric dimensions, and a yaw
//! angle about the gravity axis of the tilt frame. Initialization from a 2-D
//! region uses the median depth of the region plus a class-average size
//! prior; the regression head then predicts offsets against that
//! initialization.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Box2D;
use crate::nn::{smooth_l1, smooth_l1_grad};

#[derive(Debug, Error, PartialEq)]
pub enum Box3dError {
    #[error("invalid camera intrinsics: focal length {0} must be positive")]
    InvalidFocalLength(f64),
    #[error("no valid depth values in region")]
    NoValidDepth,
    #[error("no class-average dimensions for label {0:?}")]
    UnknownClass(String),
    #[error("invalid 3-D box dimensions: ({l}, {w}, {h}) must all be positive")]
    InvalidDims { l: f64, w: f64, h: f64 },
}

/// Pinhole intrinsics of the reference camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub f: f64,
    /// Principal point, pixels.
    pub o_x: f64,
    pub o_y: f64,
}

impl CameraIntrinsics {
    pub fn new(f: f64, o_x: f64, o_y: f64) -> Result<Self, Box3dError> {
        if !(f > 0.0) || !f.is_finite() {
            return Err(Box3dError::InvalidFocalLength(f));
        }
        Ok(CameraIntrinsics { f, o_x, o_y })
    }
}

/// Seven-entry 3-D box: camera-frame centroid (meters), dimensions (meters),
/// and yaw `theta` in `[-pi/2, pi/2]` about the gravity axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x_cam: f64,
    pub y_cam: f64,
    pub z_cam: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn validate(&self) -> Result<(), Box3dError> {
        if !(self.l > 0.0 && self.w > 0.0 && self.h > 0.0) {
            return Err(Box3dError::InvalidDims { l: self.l, w: self.w, h: self.h });
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }
}

/// Offsets between an initialized and a target seven-entry vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Box3DTargets {
    pub v_x: f64,
    pub v_y: f64,
    pub v_z: f64,
    pub v_l: f64,
    pub v_w: f64,
    pub v_h: f64,
    pub v_theta: f64,
}

impl Box3DTargets {
    pub fn as_array(&self) -> [f64; 7] {
        [self.v_x, self.v_y, self.v_z, self.v_l, self.v_w, self.v_h, self.v_theta]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Box3DTargets {
            v_x: v[0],
            v_y: v[1],
            v_z: v[2],
            v_l: v[3],
            v_w: v[4],
            v_h: v[5],
            v_theta: v[6],
        }
    }
}

/// Class-average (l, w, h) dimensions in meters, keyed by class label.
pub type ClassDims = BTreeMap<String, [f64; 3]>;

/// Initialize a 3-D box from a 2-D region: median region depth for `z`,
/// back-projected region center for `(x, y)`, class-average dimensions, and
/// zero yaw. Invalid (non-positive or non-finite) depths are dropped first.
pub fn init_box3d(
    roi: &Box2D,
    depth_patch: &[f64],
    intrinsics: &CameraIntrinsics,
    class_avg_dims: &ClassDims,
    class_label: &str,
) -> Result<Box3D, Box3dError> {
    let mut valid: Vec<f64> = depth_patch
        .iter()
        .copied()
        .filter(|d| d.is_finite() && *d > 0.0)
        .collect();
    if valid.is_empty() {
        return Err(Box3dError::NoValidDepth);
    }
    valid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = valid.len();
    let z = if n % 2 == 1 {
        valid[n / 2]
    } else {
        0.5 * (valid[n / 2 - 1] + valid[n / 2])
    };
    let dims = class_avg_dims
        .get(class_label)
        .ok_or_else(|| Box3dError::UnknownClass(class_label.to_string()))?;
    Ok(Box3D {
        x_cam: z * (roi.x - intrinsics.o_x) / intrinsics.f,
        y_cam: z * (roi.y - intrinsics.o_y) / intrinsics.f,
        z_cam: z,
        l: dims[0],
        w: dims[1],
        h: dims[2],
        theta: 0.0,
    })
}

/// Mean dimension of the initialized box; the normalization scale for the
/// centroid and angle offsets.
fn offset_scale(init: &Box3D) -> f64 {
    (init.l + init.w + init.h) / 3.0
}

/// Encode ground truth against an initialization: centroid and angle as
/// scale-normalized differences, dimensions as log-ratios (so that decoded
/// dimensions stay positive).
pub fn encode_3d_targets(init: &Box3D, gt: &Box3D) -> Result<Box3DTargets, Box3dError> {
    init.validate()?;
    gt.validate()?;
    let s = offset_scale(init);
    Ok(Box3DTargets {
        v_x: (gt.x_cam - init.x_cam) / s,
        v_y: (gt.y_cam - init.y_cam) / s,
        v_z: (gt.z_cam - init.z_cam) / s,
        v_l: (gt.l / init.l).ln(),
        v_w: (gt.w / init.w).ln(),
        v_h: (gt.h / init.h).ln(),
        v_theta: (gt.theta - init.theta) / s,
    })
}

/// Invert [`encode_3d_targets`]; `theta` is wrapped back into
/// `[-pi/2, pi/2]` (period pi: a box is symmetric under half-turn).
pub fn decode_3d(init: &Box3D, v: &Box3DTargets) -> Box3D {
    let s = offset_scale(init);
    let mut theta = init.theta + v.v_theta * s;
    while theta > FRAC_PI_2 {
        theta -= PI;
    }
    while theta < -FRAC_PI_2 {
        theta += PI;
    }
    Box3D {
        x_cam: init.x_cam + v.v_x * s,
        y_cam: init.y_cam + v.v_y * s,
        z_cam: init.z_cam + v.v_z * s,
        l: init.l * v.v_l.exp(),
        w: init.w * v.v_w.exp(),
        h: init.h * v.v_h.exp(),
        theta,
    }
}

/// 3-D regression loss: smooth-L1 over the seven entries, gated to zero for
/// background (`p_star == 0`).
pub fn loss_3d(p_star: usize, v: &Box3DTargets, v_star: &Box3DTargets, beta: f64) -> f64 {
    if p_star < 1 {
        return 0.0;
    }
    v_star
        .as_array()
        .iter()
        .zip(v.as_array())
        .map(|(&t, p)| smooth_l1(t - p, beta))
        .sum()
}

/// Gradient of [`loss_3d`] with respect to the predicted offsets.
pub fn loss_3d_grad(p_star: usize, v: &Box3DTargets, v_star: &Box3DTargets, beta: f64) -> [f64; 7] {
    let mut g = [0.0; 7];
    if p_star < 1 {
        return g;
    }
    let vs = v_star.as_array();
    let vp = v.as_array();
    for i in 0..7 {
        g[i] = -smooth_l1_grad(vs[i] - vp[i], beta);
    }
    g
}
