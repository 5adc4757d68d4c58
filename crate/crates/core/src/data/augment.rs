//! Seed-deterministic augmentation. Geometric ops act on an input volume and
//! its mask together; rotations are multiples of 90 degrees so every op is
//! exact.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::nearest_indices;
use crate::tensor::{fmt_shape, Tensor};
use crate::vardim::{PlanarImage, Volume};

use super::{Input, Label, LabeledSample};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "lowercase")]
pub enum AugmentPreset {
    #[default]
    None,
    /// Jittered centre crop, flips on every axis, 90-degree rotation.
    Lidc { crop: [usize; 3] },
    /// In-plane rescale, random crop, in-plane flips.
    Lits { crop: [usize; 3], scale: (f32, f32) },
    /// Resize the shorter side to one of `scales`, random square crop, horizontal flip.
    Imagenet { crop: usize, scales: Vec<usize> },
}

impl AugmentPreset {
    pub fn lidc() -> Self {
        Self::Lidc { crop: [48; 3] }
    }

    pub fn lits() -> Self {
        Self::Lits {
            crop: [32, 256, 256],
            scale: (0.8, 1.2),
        }
    }

    pub fn imagenet() -> Self {
        Self::Imagenet {
            crop: 224,
            scales: vec![256],
        }
    }
}

impl std::str::FromStr for AugmentPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "lidc" => Ok(Self::lidc()),
            "lits" => Ok(Self::lits()),
            "imagenet" => Ok(Self::imagenet()),
            other => Err(Error::Config(format!(
                "unknown augmentation preset `{other}` (expected none, lidc, lits or imagenet)"
            ))),
        }
    }
}

fn spatial(v: &Volume) -> [usize; 3] {
    let [_, d, h, w] = v.dims();
    [d, h, w]
}

/// Generic index remap: `out[c, p] = in[c, source(p)]` for output spatial shape `out`.
fn remap(v: &Volume, out: [usize; 3], source: impl Fn([usize; 3]) -> [usize; 3]) -> Volume {
    let [c, d, h, w] = v.dims();
    let src = v.tensor().data();
    let mut data = Vec::with_capacity(c * out.iter().product::<usize>());
    for ch in 0..c {
        for z in 0..out[0] {
            for y in 0..out[1] {
                for x in 0..out[2] {
                    let [sz, sy, sx] = source([z, y, x]);
                    data.push(src[((ch * d + sz) * h + sy) * w + sx]);
                }
            }
        }
    }
    let t = Tensor::from_vec(&[c, out[0], out[1], out[2]], data).expect("remap shape");
    Volume::new(t).expect("non-empty volume")
}

/// Mirrors spatial axis `axis` (0 = depth, 1 = height, 2 = width).
pub fn flip(v: &Volume, axis: usize) -> Volume {
    let s = spatial(v);
    let out = remap(v, s, |mut p| {
        p[axis] = s[axis] - 1 - p[axis];
        p
    });
    keep_spacing(v, out)
}

/// Rotates by 90 degrees in the plane of spatial axes `(a, b)`, `times` times.
pub fn rot90(v: &Volume, a: usize, b: usize, times: usize) -> Volume {
    let mut cur = v.clone();
    for _ in 0..times % 4 {
        let s = spatial(&cur);
        let mut out = s;
        out.swap(a, b);
        // out[a][i] = in[b] reversed, out[b][j] = in[a]
        cur = remap(&cur, out, |p| {
            let mut q = p;
            q[a] = p[b];
            q[b] = s[b] - 1 - p[a];
            q
        });
    }
    cur
}

pub fn crop(v: &Volume, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
    let s = spatial(v);
    if (0..3).any(|a| origin[a] + size[a] > s[a] || size[a] == 0) {
        return Err(Error::InvalidInput(format!(
            "crop {} at {:?} does not fit input {}",
            fmt_shape(&size),
            origin,
            fmt_shape(&s)
        )));
    }
    let out = remap(v, size, |p| std::array::from_fn(|a| p[a] + origin[a]));
    Ok(keep_spacing(v, out))
}

/// Nearest-neighbour resize of the spatial axes; exact on binary masks.
pub fn resize_nearest(v: &Volume, size: [usize; 3]) -> Volume {
    let s = spatial(v);
    let maps: Vec<Vec<usize>> = (0..3).map(|a| nearest_indices(s[a], size[a])).collect();
    remap(v, size, |p| [maps[0][p[0]], maps[1][p[1]], maps[2][p[2]]])
}

fn keep_spacing(src: &Volume, out: Volume) -> Volume {
    match src.spacing() {
        Some(sp) => out.with_spacing(sp).expect("spacing already validated"),
        None => out,
    }
}

fn check_crop(input: [usize; 3], crop: [usize; 3]) -> Result<()> {
    if (0..3).any(|a| crop[a] > input[a]) {
        return Err(Error::InvalidInput(format!(
            "crop {} is larger than input {}",
            fmt_shape(&crop),
            fmt_shape(&input)
        )));
    }
    Ok(())
}

fn apply_joint(sample: &LabeledSample, f: impl Fn(&Volume) -> Result<Volume>) -> Result<LabeledSample> {
    let Input::Volume(v) = &sample.input else {
        return Err(Error::InvalidInput(format!("sample {} is not a volume", sample.id)));
    };
    let label = match &sample.label {
        Label::Mask(m) => Label::Mask(f(m)?),
        l => l.clone(),
    };
    LabeledSample::new(Input::Volume(f(v)?), label, sample.id.clone())
}

/// Bilinear resize of a planar image (align-corners off).
pub fn resize_bilinear(img: &PlanarImage, height: usize, width: usize) -> Result<PlanarImage> {
    let (h, w) = (img.height(), img.width());
    let src = img.tensor().data();
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        let x = ((o as f32 + 0.5) * inp as f32 / out as f32 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, x - i0 as f32)
    };
    let mut data = Vec::with_capacity(3 * height * width);
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..height {
            let (y0, y1, fy) = coord(y, height, h);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, width, w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    PlanarImage::new(Tensor::from_vec(&[3, height, width], data)?, img.value_range())
}

fn planar_as_volume(img: &PlanarImage) -> Volume {
    let t = img.tensor().clone();
    let (h, w) = (img.height(), img.width());
    Volume::new(t.reshape(&[3, 1, h, w]).expect("same size")).expect("non-empty")
}

fn volume_as_planar(v: Volume, range: (f32, f32)) -> Result<PlanarImage> {
    let [c, _, h, w] = v.dims();
    PlanarImage::new(v.into_tensor().reshape(&[c, h, w])?, range)
}

/// Applies `preset` to `sample`; masks undergo the same geometric ops as inputs.
pub fn augment(sample: &LabeledSample, preset: &AugmentPreset, rng: &mut ChaCha8Rng) -> Result<LabeledSample> {
    match preset {
        AugmentPreset::None => Ok(sample.clone()),
        AugmentPreset::Lidc { crop: size } => {
            let Input::Volume(v) = &sample.input else {
                return Err(Error::InvalidInput("lidc augmentation needs a volume".into()));
            };
            let s = spatial(v);
            check_crop(s, *size)?;
            let origin: [usize; 3] = std::array::from_fn(|a| {
                let slack = s[a] - size[a];
                let jitter = slack / 4;
                let lo = slack / 2 - jitter;
                rng.gen_range(lo..=lo + 2 * jitter)
            });
            let flips: [bool; 3] = std::array::from_fn(|_| rng.gen_bool(0.5));
            let planes: Vec<(usize, usize)> = [(0, 1), (0, 2), (1, 2)]
                .into_iter()
                .filter(|&(a, b)| size[a] == size[b])
                .collect();
            let rotation = planes.choose(rng).copied().map(|p| (p, rng.gen_range(0..4)));
            apply_joint(sample, |x| {
                let mut y = crop(x, origin, *size)?;
                for (axis, &f) in flips.iter().enumerate() {
                    if f {
                        y = flip(&y, axis);
                    }
                }
                if let Some(((a, b), t)) = rotation {
                    y = rot90(&y, a, b, t);
                }
                Ok(y)
            })
        }
        AugmentPreset::Lits { crop: size, scale } => {
            let Input::Volume(v) = &sample.input else {
                return Err(Error::InvalidInput("lits augmentation needs a volume".into()));
            };
            let s = spatial(v);
            check_crop(s, *size)?;
            let f = if scale.0 < scale.1 { rng.gen_range(scale.0..scale.1) } else { scale.0 };
            let scaled = [
                s[0],
                ((s[1] as f32 * f).round() as usize).max(size[1]),
                ((s[2] as f32 * f).round() as usize).max(size[2]),
            ];
            let origin: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=scaled[a] - size[a]));
            let flips = [rng.gen_bool(0.5), rng.gen_bool(0.5)];
            apply_joint(sample, |x| {
                let mut y = crop(&resize_nearest(x, scaled), origin, *size)?;
                for (i, &fl) in flips.iter().enumerate() {
                    if fl {
                        y = flip(&y, i + 1);
                    }
                }
                Ok(y)
            })
        }
        AugmentPreset::Imagenet { crop: size, scales } => {
            let Input::Planar(img) = &sample.input else {
                return Err(Error::InvalidInput("imagenet augmentation needs a planar image".into()));
            };
            let target = *scales
                .choose(rng)
                .ok_or_else(|| Error::Config("imagenet augmentation needs at least one scale".into()))?;
            if target < *size {
                return Err(Error::InvalidInput(format!("scale {target} is smaller than crop {size}")));
            }
            let (h, w) = (img.height(), img.width());
            let (nh, nw) = if h <= w {
                (target, (w * target).div_ceil(h).max(target))
            } else {
                ((h * target).div_ceil(w).max(target), target)
            };
            let resized = planar_as_volume(&resize_bilinear(img, nh, nw)?);
            let oy = rng.gen_range(0..=nh - size);
            let ox = rng.gen_range(0..=nw - size);
            let mut y = crop(&resized, [0, oy, ox], [1, *size, *size])?;
            if rng.gen_bool(0.5) {
                y = flip(&y, 2);
            }
            let out = volume_as_planar(y, img.value_range())?;
            LabeledSample::new(Input::Planar(out), sample.label.clone(), sample.id.clone())
        }
    }
}
