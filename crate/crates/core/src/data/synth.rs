//! Seeded synthetic corpora.
//!
//! The planar corpus draws coloured primitives (disk, square, ring, cross, bar)
//! on a noisy background; the volumetric tasks embed ellipsoids, cuboids, tubes
//! and shells in Gaussian noise. Sample `i` depends only on `(spec, i)`, so
//! subsets and reorderings never change individual samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vardim::{PlanarImage, Volume};

use super::{Dataset, Input, Label, LabeledSample};

/// Bumped whenever generated values change.
pub const SYNTH_VERSION: u32 = 1;

const SHAPES_2D: [&str; 5] = ["disk", "square", "ring", "cross", "bar"];
const PALETTES: [&str; 2] = ["warm", "cool"];
const SHAPES_3D: [&str; 4] = ["ellipsoid", "cuboid", "tube", "shell"];
const MIN_EXTENT: usize = 8;

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Synth2dSpec {
    /// At most 10: five shapes, then the same shapes in a second palette.
    pub num_classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub noise_level: f32,
    pub seed: u64,
}

impl Synth2dSpec {
    pub fn small(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            size,
            noise_level: 0.1,
            seed,
        }
    }
}

fn inside_2d(shape: usize, dx: f32, dy: f32, r: f32, horizontal: bool) -> bool {
    let dist = (dx * dx + dy * dy).sqrt();
    match shape {
        0 => dist <= r,
        1 => dx.abs().max(dy.abs()) <= 0.85 * r,
        2 => dist <= r && dist >= 0.55 * r,
        3 => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
        _ => {
            let (along, across) = if horizontal { (dx, dy) } else { (dy, dx) };
            along.abs() <= 1.3 * r && across.abs() <= 0.3 * r
        }
    }
}

/// Coloured primitives on a noisy background, values roughly in `[0, 1]`.
/// Samples are ordered class-interleaved: sample `i` has class `i % num_classes`.
pub fn synth2d_corpus(spec: &Synth2dSpec) -> Result<Dataset> {
    if !(2..=10).contains(&spec.num_classes) {
        return Err(Error::Config(format!(
            "planar corpus supports 2 to 10 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.size < MIN_EXTENT {
        return Err(Error::Config(format!(
            "image size {} is too small (minimum {MIN_EXTENT})",
            spec.size
        )));
    }
    let s = spec.size;
    let noise = Normal::new(0.0, spec.noise_level.max(0.0) as f64).expect("finite noise");
    let class_names = (0..spec.num_classes)
        .map(|c| format!("{}-{}", SHAPES_2D[c % 5], PALETTES[c / 5]))
        .collect();
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for i in 0..spec.num_classes * spec.per_class {
        let class = i % spec.num_classes;
        let mut rng = sample_rng(spec.seed, i);
        let sf = s as f32;
        let cx = rng.gen_range(0.3..0.7) * sf;
        let cy = rng.gen_range(0.3..0.7) * sf;
        let r = rng.gen_range(0.16..0.3) * sf;
        let horizontal = rng.gen_bool(0.5);
        let jitter: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.1..0.1));
        let base = if class / 5 == 0 { [0.9, 0.5, 0.15] } else { [0.15, 0.5, 0.9] };
        let colour: [f32; 3] = std::array::from_fn(|c| base[c] + jitter[c]);
        let background: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.35));
        let mut data = vec![0.0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let hit = inside_2d(class % 5, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r, horizontal);
                for c in 0..3 {
                    let v = if hit { colour[c] } else { background[c] };
                    data[(c * s + y) * s + x] = v + noise.sample(&mut rng) as f32;
                }
            }
        }
        let img = PlanarImage::new(Tensor::from_vec(&[3, s, s], data)?, (0.0, 1.0))?;
        samples.push(LabeledSample::new(
            Input::Planar(img),
            Label::Class(class),
            format!("synth2d-v{SYNTH_VERSION}-{i:06}"),
        )?);
    }
    Ok(Dataset { samples, class_names })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Cls3d,
    Seg3d,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls3d" => Ok(Self::Cls3d),
            "seg3d" => Ok(Self::Seg3d),
            other => Err(Error::Config(format!("unknown task kind `{other}` (expected cls3d or seg3d)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub kind: SynthKind,
    /// Shape classes to draw from (2 to 4).
    pub num_classes: usize,
    /// `(D, H, W)`
    pub volume_shape: [usize; 3],
    pub num_samples: usize,
    /// Standard deviation of additive Gaussian noise; shapes have unit-scale contrast.
    pub noise_level: f32,
    pub seed: u64,
}

struct Solid {
    class: usize,
    centre: [f32; 3],
    radii: [f32; 3],
    axis: usize,
}

impl Solid {
    fn random(class: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let centre = std::array::from_fn(|a| rng.gen_range(0.4..0.6) * dims[a] as f32);
        let radii = std::array::from_fn(|a| rng.gen_range(0.2..0.32) * dims[a] as f32);
        Self {
            class,
            centre,
            radii,
            axis: rng.gen_range(0..3),
        }
    }

    fn contains(&self, p: [f32; 3]) -> bool {
        let u: [f32; 3] = std::array::from_fn(|a| (p[a] - self.centre[a]) / self.radii[a]);
        match self.class {
            0 => u.iter().map(|v| v * v).sum::<f32>() <= 1.0,
            1 => u.iter().all(|v| v.abs() <= 0.8),
            2 => {
                let across: f32 = (0..3).filter(|&a| a != self.axis).map(|a| u[a] * u[a]).sum();
                across <= 0.2 && u[self.axis].abs() <= 1.25
            }
            _ => {
                let r2: f32 = u.iter().map(|v| v * v).sum();
                (0.45..=1.0).contains(&r2)
            }
        }
    }
}

/// Volumetric benchmark: `(1, D, H, W)` volumes with one embedded solid each.
/// Classification labels the solid type; segmentation labels its voxels.
pub fn synth3d_task(spec: &SynthTaskSpec) -> Result<Dataset> {
    if !(2..=SHAPES_3D.len()).contains(&spec.num_classes) {
        return Err(Error::Config(format!(
            "volumetric tasks support 2 to {} shape classes, got {}",
            SHAPES_3D.len(),
            spec.num_classes
        )));
    }
    if spec.volume_shape.iter().any(|&d| d < MIN_EXTENT) {
        return Err(Error::Config(format!(
            "volume shape {:?} is too small for the shapes (minimum {MIN_EXTENT} per axis)",
            spec.volume_shape
        )));
    }
    let dims = spec.volume_shape;
    let noise = Normal::new(0.0, spec.noise_level.max(0.0) as f64).expect("finite noise");
    let n = dims.iter().product::<usize>();
    let mut samples = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let mut rng = sample_rng(spec.seed ^ 0x5eed_3d00, i);
        let class = match spec.kind {
            SynthKind::Cls3d => i % spec.num_classes,
            SynthKind::Seg3d => rng.gen_range(0..spec.num_classes),
        };
        let solid = Solid::random(class, dims, &mut rng);
        let contrast = rng.gen_range(0.6..1.0);
        let mut data = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let hit = solid.contains([z as f32 + 0.5, y as f32 + 0.5, x as f32 + 0.5]);
                    let v = if hit { contrast } else { 0.0 };
                    data.push(v + noise.sample(&mut rng) as f32);
                    mask.push(if hit { 1.0 } else { 0.0 });
                }
            }
        }
        if spec.kind == SynthKind::Seg3d && !mask.iter().any(|&m| m > 0.0) {
            return Err(Error::Config(format!("volume shape {dims:?} leaves sample {i} without foreground")));
        }
        let shape = [1, dims[0], dims[1], dims[2]];
        let input = Input::Volume(Volume::new(Tensor::from_vec(&shape, data)?)?);
        let label = match spec.kind {
            SynthKind::Cls3d => Label::Class(class),
            SynthKind::Seg3d => Label::Mask(Volume::new(Tensor::from_vec(&shape, mask)?)?),
        };
        samples.push(LabeledSample::new(input, label, format!("synth3d-v{SYNTH_VERSION}-{i:06}"))?);
    }
    let class_names = match spec.kind {
        SynthKind::Cls3d => SHAPES_3D[..spec.num_classes].iter().map(|s| s.to_string()).collect(),
        SynthKind::Seg3d => Vec::new(),
    };
    Ok(Dataset { samples, class_names })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cls(noise: f32) -> SynthTaskSpec {
        SynthTaskSpec {
            kind: SynthKind::Cls3d,
            num_classes: 3,
            volume_shape: [12, 16, 16],
            num_samples: 9,
            noise_level: noise,
            seed: 7,
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = synth3d_task(&cls(0.3)).unwrap();
        assert_eq!(a, synth3d_task(&cls(0.3)).unwrap());
        let labels: Vec<_> = a.samples.iter().map(|s| s.class().unwrap()).collect();
        assert_eq!(labels, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
        assert_ne!(a, synth3d_task(&SynthTaskSpec { seed: 8, ..cls(0.3) }).unwrap());
    }

    #[test]
    fn noiseless_classes_are_distinct_sets() {
        let ds = synth3d_task(&cls(0.0)).unwrap();
        for s in &ds.samples {
            let Input::Volume(v) = &s.input else { panic!() };
            assert!(v.tensor().data().iter().all(|&x| x == 0.0 || x >= 0.6));
            assert!(v.tensor().data().iter().any(|&x| x > 0.0));
        }
    }

    #[test]
    fn seg_masks_nonempty() {
        let spec = SynthTaskSpec {
            kind: SynthKind::Seg3d,
            num_samples: 12,
            ..cls(0.2)
        };
        for s in synth3d_task(&spec).unwrap().samples {
            assert!(s.mask().unwrap().tensor().data().contains(&1.0));
        }
    }

    #[test]
    fn too_small_is_error() {
        let spec = SynthTaskSpec {
            volume_shape: [4, 16, 16],
            ..cls(0.1)
        };
        assert!(synth3d_task(&spec).is_err());
        assert!(synth2d_corpus(&Synth2dSpec::small(3, 1, 4, 0)).is_err());
    }

    #[test]
    fn planar_corpus_shapes() {
        let ds = synth2d_corpus(&Synth2dSpec::small(10, 2, 24, 3)).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.class_names[7], "ring-cool");
        let Input::Planar(p) = &ds.samples[0].input else { panic!() };
        assert_eq!(p.tensor().shape(), &[3, 24, 24]);
    }
}
