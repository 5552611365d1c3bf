//! Bilinear RoI pooling (RoIAlign-style), differentiable with respect to
//! both the feature values and the RoI coordinates.
//!
//! Each output bin takes one bilinear sample at its center. Feature pixel
//! `k` sits at continuous feature coordinate `k`; image coordinate `x` maps
//! to feature coordinate `x / stride - 0.5`. Samples outside the feature
//! extent contribute zero, so a fully outside RoI pools to a zero feature.

use ndarray::Array3;

use crate::geometry::Box2D;

use super::FeatureMap;

/// Pooled region feature plus a flag for RoIs entirely outside the map.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRegion {
    pub values: Array3<f64>,
    pub fully_outside: bool,
}

/// Gradients produced by [`pool_region_backward`]: with respect to the
/// feature values and to the RoI center/size `(x, y, w, h)`.
#[derive(Debug, Clone)]
pub struct PoolGrad {
    pub features: Array3<f64>,
    pub d_box: [f64; 4],
}

#[inline]
fn sample_coords(roi: &Box2D, out: (usize, usize), i: usize, j: usize, stride: f64) -> (f64, f64) {
    let (oh, ow) = out;
    let x_img = (roi.x - roi.w / 2.0) + (j as f64 + 0.5) * roi.w / ow as f64;
    let y_img = (roi.y - roi.h / 2.0) + (i as f64 + 0.5) * roi.h / oh as f64;
    (x_img / stride - 0.5, y_img / stride - 0.5)
}

/// Pool `roi` (image coordinates) from a feature map to a
/// `channels x out.0 x out.1` region feature.
pub fn pool_region(f: &FeatureMap, roi: &Box2D, out: (usize, usize)) -> PooledRegion {
    let (c, fh, fw) = f.values.dim();
    let (oh, ow) = out;
    let stride = f.stride as f64;
    let mut values = Array3::zeros((c, oh, ow));
    let mut any_valid = false;
    for i in 0..oh {
        for j in 0..ow {
            let (u, v) = sample_coords(roi, out, i, j, stride);
            let u0 = u.floor();
            let v0 = v.floor();
            let ax = u - u0;
            let ay = v - v0;
            let (u0, v0) = (u0 as isize, v0 as isize);
            for (dy, wy) in [(0isize, 1.0 - ay), (1, ay)] {
                let yy = v0 + dy;
                if yy < 0 || yy >= fh as isize || wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0isize, 1.0 - ax), (1, ax)] {
                    let xx = u0 + dx;
                    if xx < 0 || xx >= fw as isize || wx == 0.0 {
                        continue;
                    }
                    any_valid = true;
                    let w = wy * wx;
                    for ch in 0..c {
                        values[(ch, i, j)] += w * f.values[(ch, yy as usize, xx as usize)];
                    }
                }
            }
        }
    }
    PooledRegion { values, fully_outside: !any_valid }
}

/// Backward pass of [`pool_region`] for the upstream gradient of the pooled
/// output.
pub fn pool_region_backward(
    f: &FeatureMap,
    roi: &Box2D,
    out: (usize, usize),
    upstream: &Array3<f64>,
) -> PoolGrad {
    let (c, fh, fw) = f.values.dim();
    let (oh, ow) = out;
    debug_assert_eq!(upstream.dim(), (c, oh, ow));
    let stride = f.stride as f64;
    let mut features = Array3::zeros((c, fh, fw));
    let mut d_box = [0.0; 4];
    for i in 0..oh {
        for j in 0..ow {
            let (u, v) = sample_coords(roi, out, i, j, stride);
            let u0f = u.floor();
            let v0f = v.floor();
            let ax = u - u0f;
            let ay = v - v0f;
            let (u0, v0) = (u0f as isize, v0f as isize);
            // corner values, zero outside
            let at = |yy: isize, xx: isize, ch: usize| -> f64 {
                if yy < 0 || yy >= fh as isize || xx < 0 || xx >= fw as isize {
                    0.0
                } else {
                    f.values[(ch, yy as usize, xx as usize)]
                }
            };
            let mut du = 0.0;
            let mut dv = 0.0;
            for ch in 0..c {
                let g = upstream[(ch, i, j)];
                if g == 0.0 {
                    continue;
                }
                let f00 = at(v0, u0, ch);
                let f01 = at(v0, u0 + 1, ch);
                let f10 = at(v0 + 1, u0, ch);
                let f11 = at(v0 + 1, u0 + 1, ch);
                // d value / d u and / d v of the bilinear sample
                du += g * ((1.0 - ay) * (f01 - f00) + ay * (f11 - f10));
                dv += g * ((1.0 - ax) * (f10 - f00) + ax * (f11 - f01));
                // scatter into the feature gradient
                for (dy, wy) in [(0isize, 1.0 - ay), (1, ay)] {
                    let yy = v0 + dy;
                    if yy < 0 || yy >= fh as isize {
                        continue;
                    }
                    for (dx, wx) in [(0isize, 1.0 - ax), (1, ax)] {
                        let xx = u0 + dx;
                        if xx < 0 || xx >= fw as isize {
                            continue;
                        }
                        features[(ch, yy as usize, xx as usize)] += g * wy * wx;
                    }
                }
            }
            // chain through the sample position: u = (x - w/2 + (j+.5) w/W)/s - .5
            let fx = (j as f64 + 0.5) / ow as f64 - 0.5;
            let fy = (i as f64 + 0.5) / oh as f64 - 0.5;
            d_box[0] += du / stride;
            d_box[1] += dv / stride;
            d_box[2] += du * fx / stride;
            d_box[3] += dv * fy / stride;
        }
    }
    PoolGrad { features, d_box }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{central_diff, max_rel_error, DEFAULT_SCALE};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn feature_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        FeatureMap {
            values: Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0)),
            stride: 4,
        }
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let f = FeatureMap { values: Array3::from_elem((3, 16, 16), 0.75), stride: 4 };
        let roi = Box2D::new(32.0, 30.0, 20.0, 16.0).unwrap();
        let out = pool_region(&f, &roi, (5, 5));
        assert!(!out.fully_outside);
        for v in out.values.iter() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_full_map_at_native_resolution_is_identity() {
        let f = feature_map(2, 16, 16, 5);
        // roi covering the whole 64x64 image at stride 4
        let roi = Box2D::new(32.0, 32.0, 64.0, 64.0).unwrap();
        let out = pool_region(&f, &roi, (16, 16));
        let diff = (&out.values - &f.values).mapv(f64::abs);
        let max = diff.fold(0.0f64, |a, &b| a.max(b));
        assert!(max < 1e-12, "max deviation {max}");
    }

    #[test]
    fn fully_outside_roi_pools_to_zero_with_flag() {
        let f = feature_map(2, 16, 16, 6);
        let roi = Box2D::new(300.0, 300.0, 10.0, 10.0).unwrap();
        let out = pool_region(&f, &roi, (3, 3));
        assert!(out.fully_outside);
        assert!(out.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let f = feature_map(2, 8, 8, 7);
        let roi = Box2D::new(14.3, 13.1, 9.7, 11.2).unwrap();
        let out = (3, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let upstream = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..1.0));

        let grad = pool_region_backward(&f, &roi, out, &upstream);

        let flat: Vec<f64> = f.values.iter().copied().collect();
        let num = central_diff(&flat, 1e-5, |vals| {
            let fm = FeatureMap {
                values: Array3::from_shape_vec((2, 8, 8), vals.to_vec()).unwrap(),
                stride: 4,
            };
            (&pool_region(&fm, &roi, out).values * &upstream).sum()
        });
        let an: Vec<f64> = grad.features.iter().copied().collect();
        assert!(max_rel_error(&an, &num, DEFAULT_SCALE) < 1e-4);
    }

    #[test]
    fn coordinate_gradient_matches_finite_differences() {
        let f = feature_map(3, 8, 8, 9);
        // fractional offsets keep samples away from cell boundaries
        let roi = Box2D::new(15.3, 12.7, 10.3, 8.9).unwrap();
        let out = (3, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let upstream = Array3::from_shape_fn((3, 3, 3), |_| rng.gen_range(-1.0..1.0));

        let grad = pool_region_backward(&f, &roi, out, &upstream);

        let coords = [roi.x, roi.y, roi.w, roi.h];
        let num = central_diff(&coords, 1e-6, |c| {
            let r = Box2D { x: c[0], y: c[1], w: c[2], h: c[3] };
            (&pool_region(&f, &r, out).values * &upstream).sum()
        });
        assert!(
            max_rel_error(&grad.d_box, &num, DEFAULT_SCALE) < 1e-4,
            "analytic {:?} numeric {:?}",
            grad.d_box,
            num
        );
    }
}
