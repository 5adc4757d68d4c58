//! 3D convolution with per-axis stride and padding.
//!
//! Lowered to GEMM through an im2col buffer laid out as `K x (N * P)`, where
//! `K = C_in * kd * kh * kw` and `P` is the number of output positions of one
//! sample. Everything runs on the calling thread in a fixed order, so results
//! are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::backbone::plan::window_out;
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Tensor};

/// Border handling along the depth axis. Height and width always pad with zeros.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthPadding {
    #[default]
    Zeros,
    /// Repeat the edge slice.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub depth_padding: DepthPadding,
}

impl ConvGeometry {
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            stride: [1, 1, 1],
            padding: [(kernel[0] - 1) / 2, (kernel[1] - 1) / 2, (kernel[2] - 1) / 2],
            depth_padding: DepthPadding::Zeros,
        }
    }
}

struct Dims {
    n: usize,
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
}

impl Dims {
    fn k(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn p(&self) -> usize {
        self.out.iter().product()
    }

    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }
}

fn dims(x: &Tensor, weight: &Tensor, geom: &ConvGeometry) -> Result<Dims> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 5 || ws.len() != 5 {
        return Err(Error::shape(
            "(N, C, D, H, W) input and (O, I, kd, kh, kw) weight",
            format!("{} and {}", fmt_shape(xs), fmt_shape(ws)),
        ));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(
            format!("{} input channels", ws[1]),
            format!("{} in {}", xs[1], fmt_shape(xs)),
        ));
    }
    let input = [xs[2], xs[3], xs[4]];
    let kernel = [ws[2], ws[3], ws[4]];
    let out = window_out("conv3d", input, kernel, geom.stride, geom.padding)?;
    Ok(Dims {
        n: xs[0],
        cin: xs[1],
        input,
        kernel,
        out,
    })
}

/// Maps an output coordinate plus kernel offset to an input coordinate, or
/// `None` when it lands in zero padding.
#[inline]
fn source_index(o: usize, k: usize, stride: usize, pad: usize, len: usize, replicate: bool) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    if i >= 0 && (i as usize) < len {
        Some(i as usize)
    } else if replicate {
        Some(i.clamp(0, len as isize - 1) as usize)
    } else {
        None
    }
}

/// Range of output x positions whose source column lies inside `[0, len)`.
#[inline]
fn valid_x(out_len: usize, k: usize, stride: usize, pad: usize, len: usize) -> (usize, usize) {
    // ix = x * stride + k - pad must satisfy 0 <= ix < len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f32], d: &Dims, geom: &ConvGeometry, cols: &mut [f32]) {
    let p = d.p();
    let np = d.n * p;
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [od, oh, ow] = d.out;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let replicate = geom.depth_padding == DepthPadding::Replicate;
    let spatial = d.in_spatial();
    for ci in 0..d.cin {
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let (x_lo, x_hi) = valid_x(ow, c, sw, pw, iw);
                    for s in 0..d.n {
                        let src = &x[(s * d.cin + ci) * spatial..][..spatial];
                        let dst = &mut cols[row * np + s * p..][..p];
                        for z in 0..od {
                            let zrow = &mut dst[z * oh * ow..][..oh * ow];
                            let Some(iz) = source_index(z, a, sd, pd, id, replicate) else {
                                zrow.fill(0.0);
                                continue;
                            };
                            for y in 0..oh {
                                let line = &mut zrow[y * ow..][..ow];
                                let Some(iy) = source_index(y, b, sh, ph, ih, false) else {
                                    line.fill(0.0);
                                    continue;
                                };
                                let base = (iz * ih + iy) * iw;
                                line[..x_lo].fill(0.0);
                                line[x_hi..].fill(0.0);
                                if sw == 1 {
                                    let start = base + x_lo + c - pw;
                                    line[x_lo..x_hi].copy_from_slice(&src[start..start + (x_hi - x_lo)]);
                                } else {
                                    for (xx, v) in line[x_lo..x_hi].iter_mut().enumerate() {
                                        *v = src[base + (x_lo + xx) * sw + c - pw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] for one sample: scatters `dcols` (`K x P`) into `dx`.
fn col2im(dcols: &[f32], d: &Dims, geom: &ConvGeometry, dx: &mut [f32]) {
    let p = d.p();
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [od, oh, ow] = d.out;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let replicate = geom.depth_padding == DepthPadding::Replicate;
    let spatial = d.in_spatial();
    for ci in 0..d.cin {
        let dst = &mut dx[ci * spatial..][..spatial];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let src = &dcols[row * p..][..p];
                    let (x_lo, x_hi) = valid_x(ow, c, sw, pw, iw);
                    for z in 0..od {
                        let Some(iz) = source_index(z, a, sd, pd, id, replicate) else {
                            continue;
                        };
                        for y in 0..oh {
                            let Some(iy) = source_index(y, b, sh, ph, ih, false) else {
                                continue;
                            };
                            let base = (iz * ih + iy) * iw;
                            let line = &src[(z * oh + y) * ow..][..ow];
                            for xx in x_lo..x_hi {
                                dst[base + xx * sw + c - pw] += line[xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` over strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    debug_assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the debug assertions above spell out the bounds; every caller
    // passes slices sized from the same `Dims`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub fn conv3d_forward(x: &Tensor, weight: &Tensor, bias: Option<&[f32]>, geom: &ConvGeometry) -> Result<Tensor> {
    let d = dims(x, weight, geom)?;
    let o = weight.shape()[0];
    let (k, p) = (d.k(), d.p());
    let np = d.n * p;
    let mut cols = vec![0.0f32; k * np];
    im2col(x.data(), &d, geom, &mut cols);
    let mut out = Tensor::zeros(&[d.n, o, d.out[0], d.out[1], d.out[2]]);
    for s in 0..d.n {
        let dst = out.outer_mut(s);
        gemm(o, k, p, weight.data(), (k, 1), &cols[s * p..], (np, 1), 0.0, dst, p);
        if let Some(bias) = bias {
            for (row, &bv) in dst.chunks_mut(p).zip(bias) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dweight: Tensor,
    pub dbias: Option<Vec<f32>>,
}

pub fn conv3d_backward(
    x: &Tensor,
    weight: &Tensor,
    with_bias: bool,
    geom: &ConvGeometry,
    dy: &Tensor,
    need_dx: bool,
) -> Result<ConvGrads> {
    let d = dims(x, weight, geom)?;
    let o = weight.shape()[0];
    let (k, p) = (d.k(), d.p());
    let np = d.n * p;
    let expected = [d.n, o, d.out[0], d.out[1], d.out[2]];
    if dy.shape() != expected {
        return Err(Error::shape(fmt_shape(&expected), fmt_shape(dy.shape())));
    }
    let mut cols = vec![0.0f32; k * np];
    im2col(x.data(), &d, geom, &mut cols);

    let mut dweight = Tensor::zeros(weight.shape());
    for s in 0..d.n {
        // dW += dy_s (O x P) * cols_s^T (P x K)
        gemm(o, p, k, dy.outer(s), (p, 1), &cols[s * p..], (1, np), 1.0, dweight.data_mut(), k);
    }
    let dbias = with_bias.then(|| {
        let mut db = vec![0.0f32; o];
        for s in 0..d.n {
            for (acc, row) in db.iter_mut().zip(dy.outer(s).chunks(p)) {
                *acc += row.iter().sum::<f32>();
            }
        }
        db
    });

    let dx = if need_dx {
        drop(cols);
        let mut dx = Tensor::zeros(x.shape());
        let mut dcols = vec![0.0f32; k * p];
        for s in 0..d.n {
            // dcols = W^T (K x O) * dy_s (O x P)
            gemm(k, o, p, weight.data(), (1, k), dy.outer(s), (p, 1), 0.0, &mut dcols, p);
            col2im(&dcols, &d, geom, dx.outer_mut(s));
        }
        Some(dx)
    } else {
        None
    };
    Ok(ConvGrads { dx, dweight, dbias })
}
