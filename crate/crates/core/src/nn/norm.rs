//! Batch and group normalization over `(N, C, ...)` tensors.

use crate::tensor::Tensor;

pub const NORM_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

pub struct NormCache {
    pub xhat: Tensor,
    /// Per channel (batch norm) or per (sample, group) (group norm).
    pub inv_std: Vec<f32>,
    pub mode: NormCacheMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormCacheMode {
    BatchTrain,
    BatchEval,
    Group(usize),
}

pub struct NormGrads {
    pub dx: Tensor,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

fn layout(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2..].iter().product())
}

/// Training-mode batch norm. Also returns the batch mean and unbiased variance
/// for the running-statistics update.
pub fn batch_norm_train(x: &Tensor, gamma: &[f32], beta: &[f32]) -> (Tensor, NormCache, Vec<f32>, Vec<f32>) {
    let (n, c, sp) = layout(x);
    let m = (n * sp) as f64;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0f32; c];
    let mut means = vec![0.0f32; c];
    let mut vars = vec![0.0f32; c];
    let xd = x.data();
    for ch in 0..c {
        let mut sum = 0.0f64;
        for s in 0..n {
            sum += xd[(s * c + ch) * sp..][..sp].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / m;
        let mut sq = 0.0f64;
        for s in 0..n {
            sq += xd[(s * c + ch) * sp..][..sp]
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let var = sq / m;
        let istd = 1.0 / (var + NORM_EPS as f64).sqrt();
        inv_std[ch] = istd as f32;
        means[ch] = mean as f32;
        vars[ch] = if m > 1.0 { (sq / (m - 1.0)) as f32 } else { var as f32 };
        let (g, b) = (gamma[ch], beta[ch]);
        for s in 0..n {
            let off = (s * c + ch) * sp;
            for i in off..off + sp {
                let h = ((xd[i] as f64 - mean) * istd) as f32;
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + b;
            }
        }
    }
    let cache = NormCache {
        xhat,
        inv_std,
        mode: NormCacheMode::BatchTrain,
    };
    (y, cache, means, vars)
}

pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
) -> (Tensor, NormCache) {
    let (n, c, sp) = layout(x);
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let inv_std: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * sp;
            for i in off..off + sp {
                let h = (x.data()[i] - running_mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let cache = NormCache {
        xhat,
        inv_std,
        mode: NormCacheMode::BatchEval,
    };
    (y, cache)
}

pub fn group_norm(x: &Tensor, groups: usize, gamma: &[f32], beta: &[f32]) -> (Tensor, NormCache) {
    let (n, c, sp) = layout(x);
    let cpg = c / groups;
    let len = cpg * sp;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0f32; n * groups];
    for s in 0..n {
        for g in 0..groups {
            let off = (s * c + g * cpg) * sp;
            let seg = &x.data()[off..off + len];
            let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
            let var = seg
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / len as f64;
            let istd = 1.0 / (var + NORM_EPS as f64).sqrt();
            inv_std[s * groups + g] = istd as f32;
            for i in 0..len {
                let ch = g * cpg + i / sp;
                let h = ((seg[i] as f64 - mean) * istd) as f32;
                xhat.data_mut()[off + i] = h;
                y.data_mut()[off + i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let cache = NormCache {
        xhat,
        inv_std,
        mode: NormCacheMode::Group(groups),
    };
    (y, cache)
}

pub fn norm_backward(cache: &NormCache, gamma: &[f32], dy: &Tensor) -> NormGrads {
    let (n, c, sp) = layout(dy);
    let xh = cache.xhat.data();
    let dyd = dy.data();
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * sp;
            let (mut gsum, mut bsum) = (0.0f64, 0.0f64);
            for i in off..off + sp {
                gsum += dyd[i] as f64 * xh[i] as f64;
                bsum += dyd[i] as f64;
            }
            dgamma[ch] += gsum as f32;
            dbeta[ch] += bsum as f32;
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    match cache.mode {
        NormCacheMode::BatchEval => {
            for s in 0..n {
                for ch in 0..c {
                    let k = gamma[ch] * cache.inv_std[ch];
                    let off = (s * c + ch) * sp;
                    for i in off..off + sp {
                        dx.data_mut()[i] = dyd[i] * k;
                    }
                }
            }
        }
        NormCacheMode::BatchTrain => {
            let m = (n * sp) as f64;
            for ch in 0..c {
                let k = gamma[ch] as f64 * cache.inv_std[ch] as f64 / m;
                let (sum_dy, sum_dy_xh) = (dbeta[ch] as f64, dgamma[ch] as f64);
                for s in 0..n {
                    let off = (s * c + ch) * sp;
                    for i in off..off + sp {
                        dx.data_mut()[i] = (k * (m * dyd[i] as f64 - sum_dy - xh[i] as f64 * sum_dy_xh)) as f32;
                    }
                }
            }
        }
        NormCacheMode::Group(groups) => {
            let cpg = c / groups;
            let len = cpg * sp;
            let m = len as f64;
            for s in 0..n {
                for g in 0..groups {
                    let off = (s * c + g * cpg) * sp;
                    let (mut sum_d, mut sum_dxh) = (0.0f64, 0.0f64);
                    for i in 0..len {
                        let d = dyd[off + i] as f64 * gamma[g * cpg + i / sp] as f64;
                        sum_d += d;
                        sum_dxh += d * xh[off + i] as f64;
                    }
                    let k = cache.inv_std[s * groups + g] as f64 / m;
                    for i in 0..len {
                        let d = dyd[off + i] as f64 * gamma[g * cpg + i / sp] as f64;
                        dx.data_mut()[off + i] = (k * (m * d - sum_d - xh[off + i] as f64 * sum_dxh)) as f32;
                    }
                }
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
