//! Variable dimension transform.
//!
//! A three-channel planar image `(3, H, W)` is reinterpreted as a one-channel
//! volume `(1, 3, H, W)`: colour plane `c` becomes depth slice `c`. The inverse
//! stacks three adjacent slices back into channels. Both directions are pure
//! reshapes, so no value is created or destroyed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Tensor};

/// A colour image in `(channels, height, width)` layout with exactly three channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarImage {
    tensor: Tensor,
    value_range: (f32, f32),
}

impl PlanarImage {
    pub fn new(tensor: Tensor, value_range: (f32, f32)) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "planar image must be (3, H, W), got {}",
                fmt_shape(shape)
            )));
        }
        if shape[0] != 3 {
            return Err(Error::InvalidInput(format!(
                "planar image must have 3 channels, got {}",
                shape[0]
            )));
        }
        if shape[1] == 0 || shape[2] == 0 {
            return Err(Error::InvalidInput(format!(
                "empty planar image {}",
                fmt_shape(shape)
            )));
        }
        Ok(Self {
            tensor,
            value_range,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self::new(Tensor::from_vec(&[3, height, width], data)?, (0.0, 1.0))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn value_range(&self) -> (f32, f32) {
        self.value_range
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn at(&self, c: usize, h: usize, w: usize) -> f32 {
        self.tensor.data()[(c * self.height() + h) * self.width() + w]
    }
}

/// A volume in `(channels, depth, height, width)` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    tensor: Tensor,
    spacing: Option<[f32; 3]>,
}

impl Volume {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 4 || shape.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "volume must be (C, D, H, W) with positive extents, got {}",
                fmt_shape(shape)
            )));
        }
        Ok(Self {
            tensor,
            spacing: None,
        })
    }

    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        Self::new(Tensor::zeros(&shape))
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        self.spacing = Some(spacing);
        Ok(self)
    }

    pub fn spacing(&self) -> Option<[f32; 3]> {
        self.spacing
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.dims()[0]
    }

    pub fn depth(&self) -> usize {
        self.dims()[1]
    }

    pub fn at(&self, c: usize, d: usize, h: usize, w: usize) -> f32 {
        let [_, dd, hh, ww] = self.dims();
        self.tensor.data()[((c * dd + d) * hh + h) * ww + w]
    }
}

/// Reformulates a colour image as a single-channel, depth-3 volume.
pub fn to_pseudo3d(image: &PlanarImage) -> Result<Volume> {
    let shape = image.tensor().shape();
    if shape[0] != 3 {
        return Err(Error::InvalidInput(format!(
            "expected 3 colour channels, got {}",
            shape[0]
        )));
    }
    let tensor = image.tensor().clone().reshape(&[1, 3, shape[1], shape[2]])?;
    Volume::new(tensor)
}

/// Stacks the three slices of a `(1, 3, H, W)` volume back into colour channels.
pub fn from_pseudo3d(volume: &Volume) -> Result<PlanarImage> {
    let [c, d, h, w] = volume.dims();
    if c != 1 || d != 3 {
        return Err(Error::InvalidInput(format!(
            "pseudo-3D volume must be (1, 3, H, W), got {}",
            fmt_shape(&[c, d, h, w])
        )));
    }
    PlanarImage::new(volume.tensor().clone().reshape(&[3, h, w])?, (0.0, 1.0))
}

/// An intensity window: clip to `[lo, hi]`, then map affinely onto `[out_lo, out_hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityWindow {
    pub lo: f32,
    pub hi: f32,
    pub out_lo: f32,
    pub out_hi: f32,
}

impl IntensityWindow {
    /// Liver CT window, normalized to `[0, 255]`.
    pub const LIVER: Self = Self::new(-200.0, 250.0);
    /// Wide lesion-detection CT window, normalized to `[0, 255]`.
    pub const LESION: Self = Self::new(-1024.0, 1050.0);

    pub const fn new(lo: f32, hi: f32) -> Self {
        Self {
            lo,
            hi,
            out_lo: 0.0,
            out_hi: 255.0,
        }
    }

    pub fn with_output(self, out_lo: f32, out_hi: f32) -> Self {
        Self {
            out_lo,
            out_hi,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::InvalidRange(format!(
                "window lo {} must be below hi {}",
                self.lo, self.hi
            )));
        }
        if !(self.out_lo < self.out_hi) {
            return Err(Error::InvalidRange(format!(
                "output lo {} must be below output hi {}",
                self.out_lo, self.out_hi
            )));
        }
        Ok(())
    }

    pub fn apply_scalar(&self, v: f32) -> f32 {
        let clipped = v.clamp(self.lo, self.hi);
        if clipped == self.hi {
            return self.out_hi;
        }
        let t = (clipped - self.lo) / (self.hi - self.lo);
        self.out_lo + t * (self.out_hi - self.out_lo)
    }
}

pub fn window_intensity(
    volume: &Volume,
    lo: f32,
    hi: f32,
    out_lo: f32,
    out_hi: f32,
) -> Result<Volume> {
    let window = IntensityWindow::new(lo, hi).with_output(out_lo, out_hi);
    apply_window(volume, &window)
}

pub fn apply_window(volume: &Volume, window: &IntensityWindow) -> Result<Volume> {
    window.validate()?;
    let mut out = volume.clone();
    for v in out.tensor_mut().data_mut() {
        *v = window.apply_scalar(*v);
    }
    Ok(out)
}
