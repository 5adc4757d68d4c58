//! Forward and backward kernels for the layers a residual backbone needs.

pub mod conv;
pub mod norm;
pub mod pool;

pub use conv::{conv3d_backward, conv3d_forward, ConvGeometry, ConvGrads, DepthPadding};
pub use norm::{batch_norm_eval, batch_norm_train, group_norm, norm_backward, NormCache};
pub use pool::{max_pool3d, max_pool3d_backward};

use crate::tensor::Tensor;

pub fn relu_inplace(x: &mut Tensor) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Tensor, dy: &mut Tensor) {
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Nearest-neighbour index map from `out_len` positions onto `in_len`.
pub fn nearest_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    (0..out_len).map(|o| (o * in_len / out_len).min(in_len - 1)).collect()
}

/// Nearest-neighbour resize of the spatial axes of an `(N, C, D, H, W)` tensor.
pub fn upsample_nearest(x: &Tensor, out: [usize; 3]) -> Tensor {
    let s = x.shape();
    let (planes, input) = (s[0] * s[1], [s[2], s[3], s[4]]);
    let maps: Vec<Vec<usize>> = (0..3).map(|a| nearest_indices(input[a], out[a])).collect();
    let in_sp: usize = input.iter().product();
    let out_sp: usize = out.iter().product();
    let mut y = Tensor::zeros(&[s[0], s[1], out[0], out[1], out[2]]);
    for p in 0..planes {
        let src = &x.data()[p * in_sp..][..in_sp];
        let dst = &mut y.data_mut()[p * out_sp..][..out_sp];
        let mut o = 0;
        for &z in &maps[0] {
            for &yy in &maps[1] {
                for &xx in &maps[2] {
                    dst[o] = src[(z * input[1] + yy) * input[2] + xx];
                    o += 1;
                }
            }
        }
    }
    y
}

pub fn upsample_nearest_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let s = input_shape;
    let out = [dy.shape()[2], dy.shape()[3], dy.shape()[4]];
    let input = [s[2], s[3], s[4]];
    let maps: Vec<Vec<usize>> = (0..3).map(|a| nearest_indices(input[a], out[a])).collect();
    let in_sp: usize = input.iter().product();
    let out_sp: usize = out.iter().product();
    let mut dx = Tensor::zeros(input_shape);
    for p in 0..s[0] * s[1] {
        let src = &dy.data()[p * out_sp..][..out_sp];
        let dst = &mut dx.data_mut()[p * in_sp..][..in_sp];
        let mut o = 0;
        for &z in &maps[0] {
            for &yy in &maps[1] {
                for &xx in &maps[2] {
                    dst[(z * input[1] + yy) * input[2] + xx] += src[o];
                    o += 1;
                }
            }
        }
    }
    dx
}
