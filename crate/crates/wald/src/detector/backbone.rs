//! Per-modality convolutional backbone: three 3x3 conv blocks with two 2x
//! max-pool stages, for an overall feature stride of 4.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::nn::{maxpool2, maxpool2_backward, relu, relu_backward, Conv2d, Conv2dGrads};

#[derive(Debug, Clone)]
pub struct StreamParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

#[derive(Debug, Clone)]
pub struct StreamGrads {
    pub conv1: Conv2dGrads,
    pub conv2: Conv2dGrads,
    pub conv3: Conv2dGrads,
}

/// Activations cached by the training forward pass.
#[derive(Debug, Clone)]
pub struct StreamCache {
    input: Array3<f64>,
    a1: Array3<f64>,
    idx1: ndarray::Array3<usize>,
    p1: Array3<f64>,
    a2: Array3<f64>,
    idx2: ndarray::Array3<usize>,
    p2: Array3<f64>,
    a3: Array3<f64>,
}

impl StreamParams {
    pub fn init<R: Rng>(channels: [usize; 3], rng: &mut R) -> Self {
        StreamParams {
            conv1: Conv2d::he_init(1, channels[0], rng),
            conv2: Conv2d::he_init(channels[0], channels[1], rng),
            conv3: Conv2d::he_init(channels[1], channels[2], rng),
        }
    }

    /// Image (h, w) scaled by `scale` into a (1, h, w) input volume.
    pub fn prepare_input(img: &Array2<f64>, scale: f64) -> Array3<f64> {
        let (h, w) = img.dim();
        let mut x = Array3::zeros((1, h, w));
        x.index_axis_mut(ndarray::Axis(0), 0).assign(&(img * scale));
        x
    }

    pub fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let a1 = relu(&self.conv1.forward(input));
        let (p1, _) = maxpool2(&a1);
        let a2 = relu(&self.conv2.forward(&p1));
        let (p2, _) = maxpool2(&a2);
        relu(&self.conv3.forward(&p2))
    }

    pub fn forward_train(&self, input: Array3<f64>) -> (Array3<f64>, StreamCache) {
        let a1 = relu(&self.conv1.forward(&input));
        let (p1, idx1) = maxpool2(&a1);
        let a2 = relu(&self.conv2.forward(&p1));
        let (p2, idx2) = maxpool2(&a2);
        let a3 = relu(&self.conv3.forward(&p2));
        (
            a3.clone(),
            StreamCache { input, a1, idx1, p1, a2, idx2, p2, a3 },
        )
    }

    /// Backward from the gradient of the output feature map; image inputs
    /// are leaves so no input gradient is returned.
    pub fn backward(&self, cache: &StreamCache, d_out: &Array3<f64>) -> StreamGrads {
        let d_a3 = relu_backward(&cache.a3, d_out);
        let (d_p2, g3) = self.conv3.backward(&cache.p2, &d_a3);
        let d_a2 = maxpool2_backward(cache.a2.dim(), &cache.idx2, &d_p2);
        let d_a2 = relu_backward(&cache.a2, &d_a2);
        let (d_p1, g2) = self.conv2.backward(&cache.p1, &d_a2);
        let d_a1 = maxpool2_backward(cache.a1.dim(), &cache.idx1, &d_p1);
        let d_a1 = relu_backward(&cache.a1, &d_a1);
        let (_, g1) = self.conv1.backward(&cache.input, &d_a1);
        StreamGrads { conv1: g1, conv2: g2, conv3: g3 }
    }

    pub fn zero_grads(&self) -> StreamGrads {
        StreamGrads {
            conv1: self.conv1.zero_grads(),
            conv2: self.conv2.zero_grads(),
            conv3: self.conv3.zero_grads(),
        }
    }
}

impl StreamGrads {
    pub fn accumulate(&mut self, other: &StreamGrads) {
        self.conv1.accumulate(&other.conv1);
        self.conv2.accumulate(&other.conv2);
        self.conv3.accumulate(&other.conv3);
    }
}
