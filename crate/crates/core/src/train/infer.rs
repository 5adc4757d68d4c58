use crate::backbone::{BackboneModel, HeadKind, Mode};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Tensor};
use crate::vardim::Volume;

/// Anything that maps a `(C, D, H, W)` patch to per-voxel outputs on the same grid.
pub trait VolumePredictor {
    fn predict(&self, patch: &Volume) -> Result<Volume>;
}

impl VolumePredictor for BackboneModel {
    /// Two-channel voxel probabilities from the segmentation head.
    fn predict(&self, patch: &Volume) -> Result<Volume> {
        if self.head_kind() != Some(HeadKind::Segment) {
            return Err(Error::Config("voxel prediction needs a segmentation head".into()));
        }
        let [c, d, h, w] = patch.dims();
        let x = patch.tensor().clone().reshape(&[1, c, d, h, w])?;
        let fwd = self.forward_batch(&x, Mode::Eval)?;
        let logits = self.segment_logits(&fwd.stages[0], [d, h, w])?;
        Volume::new(softmax_channels(&logits).reshape(&[2, d, h, w])?)
    }
}

/// Softmax over axis 1 of an `(N, C, ...)` tensor.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    let v: usize = s[2..].iter().product();
    let mut out = logits.clone();
    for b in 0..n {
        let o = out.outer_mut(b);
        for i in 0..v {
            let m = (0..c).map(|k| o[k * v + i]).fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = (0..c).map(|k| (o[k * v + i] - m).exp()).sum();
            for k in 0..c {
                o[k * v + i] = (o[k * v + i] - m).exp() / z;
            }
        }
    }
    out
}

/// Window origins along one axis: every `stride` from 0, with the last window
/// aligned to the end. A patch longer than the axis is clamped to it.
pub fn window_starts(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::InvalidInput("sliding-window stride must be positive".into()));
    }
    if patch == 0 {
        return Err(Error::InvalidInput("sliding-window patch must be non-empty".into()));
    }
    let patch = patch.min(len);
    let last = len - patch;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s < last).collect();
    starts.push(last);
    Ok(starts)
}

/// Window origins per spatial axis; the window count is their product.
pub fn window_grid(volume: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Result<[Vec<usize>; 3]> {
    Ok([
        window_starts(volume[0], patch[0], stride[0])?,
        window_starts(volume[1], patch[1], stride[1])?,
        window_starts(volume[2], patch[2], stride[2])?,
    ])
}

/// Dense prediction by overlapping windows, averaging overlaps per voxel.
pub fn sliding_window_infer(
    predictor: &dyn VolumePredictor,
    volume: &Volume,
    patch: [usize; 3],
    stride: [usize; 3],
) -> Result<Volume> {
    let [c, d, h, w] = volume.dims();
    let dims = [d, h, w];
    let grid = window_grid(dims, patch, stride)?;
    let patch: [usize; 3] = std::array::from_fn(|a| patch[a].min(dims[a]));
    let src = volume.tensor().data();
    let mut acc: Option<Vec<f32>> = None;
    let mut out_channels = 0;
    let mut count = vec![0u32; d * h * w];
    for &z0 in &grid[0] {
        for &y0 in &grid[1] {
            for &x0 in &grid[2] {
                let mut data = Vec::with_capacity(c * patch.iter().product::<usize>());
                for ch in 0..c {
                    for z in z0..z0 + patch[0] {
                        let row = ((ch * d + z) * h + y0) * w + x0;
                        for y in 0..patch[1] {
                            data.extend_from_slice(&src[row + y * w..row + y * w + patch[2]]);
                        }
                    }
                }
                let p = Volume::new(Tensor::from_vec(&[c, patch[0], patch[1], patch[2]], data)?)?;
                let pred = predictor.predict(&p)?;
                let [pc, pd, ph, pw] = pred.dims();
                if [pd, ph, pw] != patch {
                    return Err(Error::shape(fmt_shape(&patch), fmt_shape(&[pd, ph, pw])));
                }
                let acc = acc.get_or_insert_with(|| {
                    out_channels = pc;
                    vec![0.0; pc * d * h * w]
                });
                if pc != out_channels {
                    return Err(Error::shape(format!("{out_channels} output channels"), pc.to_string()));
                }
                let pv = pred.tensor().data();
                for k in 0..pc {
                    for z in 0..pd {
                        for y in 0..ph {
                            for x in 0..pw {
                                let dst = (z0 + z) * h * w + (y0 + y) * w + x0 + x;
                                acc[k * d * h * w + dst] += pv[((k * pd + z) * ph + y) * pw + x];
                                if k == 0 {
                                    count[dst] += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut acc = acc.expect("grid has at least one window");
    let n = d * h * w;
    for (i, v) in acc.iter_mut().enumerate() {
        *v /= count[i % n] as f32;
    }
    Volume::new(Tensor::from_vec(&[out_channels, d, h, w], acc)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f32);

    impl VolumePredictor for Constant {
        fn predict(&self, patch: &Volume) -> Result<Volume> {
            let [_, d, h, w] = patch.dims();
            Volume::new(Tensor::full(&[1, d, h, w], self.0))
        }
    }

    struct Identity;

    impl VolumePredictor for Identity {
        fn predict(&self, patch: &Volume) -> Result<Volume> {
            Ok(patch.clone())
        }
    }

    #[test]
    fn grid_counts() {
        let g = window_grid([64, 512, 512], [32, 256, 256], [12, 128, 128]).unwrap();
        assert_eq!(g[0], vec![0, 12, 24, 32]);
        assert_eq!([g[0].len(), g[1].len(), g[2].len()], [4, 3, 3]);
        assert_eq!(window_starts(10, 10, 3).unwrap(), vec![0]);
        assert_eq!(window_starts(5, 8, 3).unwrap(), vec![0]);
        assert!(window_starts(10, 4, 0).is_err());
    }

    #[test]
    fn averaging_preserves_constants_and_identity() {
        let v = Volume::new(Tensor::from_vec(&[1, 5, 6, 7], (0..210).map(|i| i as f32).collect()).unwrap()).unwrap();
        let c = sliding_window_infer(&Constant(0.25), &v, [3, 4, 4], [1, 2, 3]).unwrap();
        assert!(c.tensor().data().iter().all(|&x| (x - 0.25).abs() < 1e-7));
        let id = sliding_window_infer(&Identity, &v, [3, 4, 4], [2, 1, 2]).unwrap();
        assert!(id.tensor().max_abs_diff(v.tensor()) < 1e-4);
    }
}
