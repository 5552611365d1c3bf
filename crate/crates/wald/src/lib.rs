//! Weakly-aligned multi-modal detection toolkit.
//!
//! The crate implements the full desk-scale pipeline for detecting objects
//! in image pairs whose modalities are not pixel-aligned: paired-annotation
//! data model and synthetic scene generation, a two-stream detector with
//! region feature alignment (per-RoI shift prediction and re-pooling), RoI
//! jitter augmentation, confidence-aware feature fusion, 3-D box regression
//! for RGB-D pairs, and the position-shift robustness evaluation protocol
//! (log-average miss rate, mAP, shift sweeps, degradation rates, and
//! directional statistics).

pub mod box3d;
pub mod caf;
pub mod eval;
pub mod detector;
pub mod geometry;
pub mod nn;
pub mod numdiff;
pub mod paired;
pub mod par;
pub mod rfa;

pub use geometry::{apply_shift, enlarge_roi, iou, shift_targets, Box2D, Extent, ShiftTarget};
