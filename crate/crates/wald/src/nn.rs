//! Small neural-network building blocks with explicit backward passes.
//!
//! Everything runs in f64 on the CPU. Layers are plain parameter structs;
//! forward passes are pure (`&self`), and backward passes take whatever
//! activations the caller cached, so a model is shareable across threads
//! during inference while training stays single-writer.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Fully connected layer, `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    /// (out, in)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear { weight: Array2::zeros((out_dim, in_dim)), bias: Array1::zeros(out_dim) }
    }

    /// He-normal weights, zero bias.
    pub fn he_init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| normal.sample(rng));
        Linear { weight, bias: Array1::zeros(out_dim) }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    /// Returns (dx, grads) given the input and upstream gradient.
    pub fn backward(&self, x: &Array1<f64>, dy: &Array1<f64>) -> (Array1<f64>, LinearGrads) {
        let dx = self.weight.t().dot(dy);
        let dweight = dy
            .view()
            .insert_axis(ndarray::Axis(1))
            .dot(&x.view().insert_axis(ndarray::Axis(0)));
        (dx, LinearGrads { weight: dweight, bias: dy.clone() })
    }

    pub fn zero_grads(&self) -> LinearGrads {
        LinearGrads {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

impl LinearGrads {
    pub fn accumulate(&mut self, other: &LinearGrads) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

/// 3x3 same-padding convolution over (C, H, W) maps, stride 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_c, in_c, 3, 3)
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn he_init<R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        let fan_in = (in_c * 9) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let weight = Array4::from_shape_fn((out_c, in_c, 3, 3), |_| normal.sample(rng));
        Conv2d { weight, bias: Array1::zeros(out_c) }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (in_c, h, w) = x.dim();
        let out_c = self.weight.dim().0;
        debug_assert_eq!(in_c, self.weight.dim().1);
        let mut y = Array3::zeros((out_c, h, w));
        for oc in 0..out_c {
            let mut plane = y.index_axis_mut(ndarray::Axis(0), oc);
            plane.fill(self.bias[oc]);
            for ic in 0..in_c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.weight[(oc, ic, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - 1;
                        let dx = kx as isize - 1;
                        for iy in 0..h {
                            let sy = iy as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for ix in 0..w {
                                let sx = ix as isize + dx;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                plane[(iy, ix)] += wv * x[(ic, sy as usize, sx as usize)];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Returns (dx, grads) given the cached input and upstream gradient.
    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>) -> (Array3<f64>, Conv2dGrads) {
        let (in_c, h, w) = x.dim();
        let out_c = self.weight.dim().0;
        let mut dx = Array3::zeros((in_c, h, w));
        let mut dweight = Array4::zeros(self.weight.raw_dim());
        let mut dbias = Array1::zeros(out_c);
        for oc in 0..out_c {
            let gplane = dy.index_axis(ndarray::Axis(0), oc);
            dbias[oc] += gplane.sum();
            for ic in 0..in_c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let dyo = ky as isize - 1;
                        let dxo = kx as isize - 1;
                        let wv = self.weight[(oc, ic, ky, kx)];
                        let mut wgrad = 0.0;
                        for iy in 0..h {
                            let sy = iy as isize + dyo;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for ix in 0..w {
                                let sx = ix as isize + dxo;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let g = gplane[(iy, ix)];
                                wgrad += g * x[(ic, sy as usize, sx as usize)];
                                dx[(ic, sy as usize, sx as usize)] += g * wv;
                            }
                        }
                        dweight[(oc, ic, ky, kx)] += wgrad;
                    }
                }
            }
        }
        (dx, Conv2dGrads { weight: dweight, bias: dbias })
    }

    pub fn zero_grads(&self) -> Conv2dGrads {
        Conv2dGrads {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

impl Conv2dGrads {
    pub fn accumulate(&mut self, other: &Conv2dGrads) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

/// 1x1 convolution: a per-cell linear map over channels.
#[derive(Debug, Clone)]
pub struct PointwiseConv {
    /// (out_c, in_c)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct PointwiseGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl PointwiseConv {
    pub fn zeros(in_c: usize, out_c: usize) -> Self {
        PointwiseConv { weight: Array2::zeros((out_c, in_c)), bias: Array1::zeros(out_c) }
    }

    pub fn he_init<R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_c as f64).sqrt()).unwrap();
        let weight = Array2::from_shape_fn((out_c, in_c), |_| normal.sample(rng));
        PointwiseConv { weight, bias: Array1::zeros(out_c) }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (in_c, h, w) = x.dim();
        let out_c = self.weight.nrows();
        debug_assert_eq!(in_c, self.weight.ncols());
        let mut y = Array3::zeros((out_c, h, w));
        for oc in 0..out_c {
            for ic in 0..in_c {
                let wv = self.weight[(oc, ic)];
                for iy in 0..h {
                    for ix in 0..w {
                        y[(oc, iy, ix)] += wv * x[(ic, iy, ix)];
                    }
                }
            }
            y.index_axis_mut(ndarray::Axis(0), oc).mapv_inplace(|v| v + self.bias[oc]);
        }
        y
    }

    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>) -> (Array3<f64>, PointwiseGrads) {
        let (in_c, h, w) = x.dim();
        let out_c = self.weight.nrows();
        let mut dx = Array3::zeros((in_c, h, w));
        let mut dweight = Array2::zeros((out_c, in_c));
        let mut dbias = Array1::zeros(out_c);
        for oc in 0..out_c {
            let g = dy.index_axis(ndarray::Axis(0), oc);
            dbias[oc] += g.sum();
            for ic in 0..in_c {
                let wv = self.weight[(oc, ic)];
                let mut acc = 0.0;
                for iy in 0..h {
                    for ix in 0..w {
                        let gv = g[(iy, ix)];
                        acc += gv * x[(ic, iy, ix)];
                        dx[(ic, iy, ix)] += gv * wv;
                    }
                }
                dweight[(oc, ic)] += acc;
            }
        }
        (dx, PointwiseGrads { weight: dweight, bias: dbias })
    }

    pub fn zero_grads(&self) -> PointwiseGrads {
        PointwiseGrads {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

impl PointwiseGrads {
    pub fn accumulate(&mut self, other: &PointwiseGrads) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

/// ReLU; backward masks by the cached output.
pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(y: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

pub fn relu_vec(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_vec_backward(y: &Array1<f64>, dy: &Array1<f64>) -> Array1<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// 2x2 max pooling with stride 2, ceil mode. Returns the pooled map and the
/// flat argmax index (y * w + x) per output cell for the backward pass.
pub fn maxpool2(x: &Array3<f64>) -> (Array3<f64>, Array3<usize>) {
    let (c, h, w) = x.dim();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut y = Array3::zeros((c, oh, ow));
    let mut idx = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for iy in 0..oh {
            for ix in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0usize;
                for sy in (iy * 2)..((iy * 2 + 2).min(h)) {
                    for sx in (ix * 2)..((ix * 2 + 2).min(w)) {
                        let v = x[(ch, sy, sx)];
                        if v > best {
                            best = v;
                            best_at = sy * w + sx;
                        }
                    }
                }
                y[(ch, iy, ix)] = best;
                idx[(ch, iy, ix)] = best_at;
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(
    input_dim: (usize, usize, usize),
    idx: &Array3<usize>,
    dy: &Array3<f64>,
) -> Array3<f64> {
    let (c, _h, w) = input_dim;
    let mut dx = Array3::zeros(input_dim);
    for ch in 0..c {
        for ((iy, ix), &at) in idx.index_axis(ndarray::Axis(0), ch).indexed_iter() {
            dx[(ch, at / w, at % w)] += dy[(ch, iy, ix)];
        }
    }
    dx
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps = logits.mapv(|v| (v - m).exp());
    let sum = exps.sum();
    exps / sum
}

/// Cross-entropy of a softmax distribution against an integer label.
/// Returns (loss, probs); the gradient w.r.t. the logits is `probs - onehot`.
pub fn softmax_cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let probs = softmax(logits);
    let p = probs[label].max(1e-300);
    (-p.ln(), probs)
}

pub fn softmax_cross_entropy_backward(probs: &Array1<f64>, label: usize) -> Array1<f64> {
    let mut g = probs.clone();
    g[label] -= 1.0;
    g
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary cross-entropy on a logit; gradient w.r.t. the logit is `p - target`.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    // log(sigmoid) written via softplus for stability at large |logit|
    let loss = softplus(-logit) * target + softplus(logit) * (1.0 - target);
    (loss, p - target)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Smooth-L1 (Huber-style) penalty with transition point `beta`.
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{central_diff, max_rel_error, DEFAULT_SCALE, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut r = rng();
        let layer = Linear::he_init(5, 3, &mut r);
        let x = Array1::from_shape_fn(5, |_| r.gen_range(-1.0..1.0));
        let dy = Array1::from_shape_fn(3, |_| r.gen_range(-1.0..1.0));

        let (dx, grads) = layer.backward(&x, &dy);

        // loss = dy . forward(x), so d loss / d x should equal dx
        let loss = |xs: &[f64]| {
            let xv = Array1::from_vec(xs.to_vec());
            layer.forward(&xv).dot(&dy)
        };
        let num = central_diff(x.as_slice().unwrap(), DEFAULT_STEP, loss);
        assert!(max_rel_error(dx.as_slice().unwrap(), &num, DEFAULT_SCALE) < 1e-6);

        // and d loss / d W
        let wflat: Vec<f64> = layer.weight.iter().copied().collect();
        let num_w = central_diff(&wflat, DEFAULT_STEP, |ws| {
            let mut l2 = layer.clone();
            l2.weight = Array2::from_shape_vec((3, 5), ws.to_vec()).unwrap();
            l2.forward(&x).dot(&dy)
        });
        let an_w: Vec<f64> = grads.weight.iter().copied().collect();
        assert!(max_rel_error(&an_w, &num_w, DEFAULT_SCALE) < 1e-6);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng();
        let conv = Conv2d::he_init(2, 3, &mut r);
        let x = Array3::from_shape_fn((2, 5, 4), |_| r.gen_range(-1.0..1.0));
        let dy = Array3::from_shape_fn((3, 5, 4), |_| r.gen_range(-1.0..1.0));
        let (dx, grads) = conv.backward(&x, &dy);

        let loss_of_x = |xs: &[f64]| {
            let xv = Array3::from_shape_vec((2, 5, 4), xs.to_vec()).unwrap();
            (&conv.forward(&xv) * &dy).sum()
        };
        let xflat: Vec<f64> = x.iter().copied().collect();
        let num = central_diff(&xflat, DEFAULT_STEP, loss_of_x);
        let an: Vec<f64> = dx.iter().copied().collect();
        assert!(max_rel_error(&an, &num, DEFAULT_SCALE) < 1e-6);

        let wflat: Vec<f64> = conv.weight.iter().copied().collect();
        let num_w = central_diff(&wflat, DEFAULT_STEP, |ws| {
            let mut c2 = conv.clone();
            c2.weight = Array4::from_shape_vec((3, 2, 3, 3), ws.to_vec()).unwrap();
            (&c2.forward(&x) * &dy).sum()
        });
        let an_w: Vec<f64> = grads.weight.iter().copied().collect();
        assert!(max_rel_error(&an_w, &num_w, DEFAULT_SCALE) < 1e-6);
    }

    #[test]
    fn maxpool_round_trip_gradient() {
        let mut r = rng();
        let x = Array3::from_shape_fn((1, 5, 5), |_| r.gen_range(-1.0..1.0));
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.dim(), (1, 3, 3)); // ceil(5/2)
        let dy = Array3::from_elem(y.raw_dim(), 1.0);
        let dx = maxpool2_backward(x.dim(), &idx, &dy);
        // every output cell routes exactly one unit of gradient
        assert!((dx.sum() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_gradient() {
        let logits = Array1::from_vec(vec![0.2, -0.7, 1.3]);
        let (loss, probs) = softmax_cross_entropy(&logits, 2);
        assert!(loss > 0.0);
        let g = softmax_cross_entropy_backward(&probs, 2);
        let num = central_diff(logits.as_slice().unwrap(), DEFAULT_STEP, |ls| {
            let lv = Array1::from_vec(ls.to_vec());
            softmax_cross_entropy(&lv, 2).0
        });
        assert!(max_rel_error(g.as_slice().unwrap(), &num, DEFAULT_SCALE) < 1e-7);
    }

    #[test]
    fn smooth_l1_hand_values_and_gradient() {
        assert_eq!(smooth_l1(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1(-0.5, 1.0), 0.125);
        assert_eq!(smooth_l1(2.0, 1.0), 1.5);
        for &x in &[-2.3, -0.4, 0.1, 0.9, 3.0] {
            let num = central_diff(&[x], 1e-6, |v| smooth_l1(v[0], 1.0));
            assert!((smooth_l1_grad(x, 1.0) - num[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_logit_gradient() {
        for &(l, t) in &[(0.3, 1.0), (-2.0, 0.0), (5.0, 1.0), (0.0, 0.5)] {
            let (_, g) = bce_with_logit(l, t);
            let num = central_diff(&[l], 1e-6, |v| bce_with_logit(v[0], t).0);
            assert!((g - num[0]).abs() < 1e-6, "logit {l} target {t}");
        }
    }
}
