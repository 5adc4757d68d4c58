use crate::backbone::plan::{window_out, PoolSpec};
use crate::error::Result;
use crate::tensor::Tensor;

/// Max pooling; padded positions never win. Returns the output and, for each
/// output element, the flat index of the selected input element.
pub fn max_pool3d(x: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let input = [s[2], s[3], s[4]];
    let out = window_out("max_pool3d", input, spec.kernel, spec.stride, spec.padding)?;
    let mut y = Tensor::zeros(&[n, c, out[0], out[1], out[2]]);
    let mut argmax = Vec::with_capacity(y.numel());
    let in_sp: usize = input.iter().product();
    let xd = x.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * in_sp;
        for z in 0..out[0] {
            for yy in 0..out[1] {
                for xx in 0..out[2] {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for a in 0..spec.kernel[0] {
                        let iz = (z * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                        if iz < 0 || iz >= input[0] as isize {
                            continue;
                        }
                        for b in 0..spec.kernel[1] {
                            let iy = (yy * spec.stride[1] + b) as isize - spec.padding[1] as isize;
                            if iy < 0 || iy >= input[1] as isize {
                                continue;
                            }
                            for cc in 0..spec.kernel[2] {
                                let ix = (xx * spec.stride[2] + cc) as isize - spec.padding[2] as isize;
                                if ix < 0 || ix >= input[2] as isize {
                                    continue;
                                }
                                let i = base + ((iz as usize * input[1]) + iy as usize) * input[2] + ix as usize;
                                if xd[i] > best || best_i == usize::MAX {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    y.data_mut()[o] = best;
                    argmax.push(best_i);
                    o += 1;
                }
            }
        }
    }
    Ok((y, argmax))
}

pub fn max_pool3d_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}
