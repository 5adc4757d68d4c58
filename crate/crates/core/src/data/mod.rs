//! Labeled samples: image folders for pre-training, seeded synthetic volumes for
//! transfer experiments, and augmentation.

pub mod augment;
pub mod folder;
pub mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Fingerprint, Layout};
use crate::backbone::{Family, Stem};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vardim::{PlanarImage, Volume};

pub use augment::{augment, AugmentPreset};
pub use folder::load_image_folder;
pub use synth::{synth2d_corpus, synth3d_task, Synth2dSpec, SynthKind, SynthTaskSpec};

#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Planar(PlanarImage),
    Volume(Volume),
}

impl Input {
    /// The input as a volume; planar images go through the pseudo-3D reshape.
    pub fn to_volume(&self) -> Result<Volume> {
        match self {
            Input::Planar(p) => crate::vardim::to_pseudo3d(p),
            Input::Volume(v) => Ok(v.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    /// Binary `(1, D, H, W)` mask on the input grid.
    Mask(Volume),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub input: Input,
    pub label: Label,
    pub id: String,
}

impl LabeledSample {
    pub fn new(input: Input, label: Label, id: impl Into<String>) -> Result<Self> {
        if let (Label::Mask(m), Input::Volume(v)) = (&label, &input) {
            let (a, b) = (m.dims(), v.dims());
            if m.channels() != 1 || a[1..] != b[1..] {
                return Err(Error::shape(
                    format!("(1, {}, {}, {}) mask", b[1], b[2], b[3]),
                    crate::tensor::fmt_shape(&a),
                ));
            }
        }
        if let (Label::Mask(_), Input::Planar(_)) = (&label, &input) {
            return Err(Error::InvalidInput("masks are only supported on volumes".into()));
        }
        Ok(Self { input, label, id: id.into() })
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::Mask(_) => None,
        }
    }

    pub fn mask(&self) -> Option<&Volume> {
        match &self.label {
            Label::Mask(m) => Some(m),
            Label::Class(_) => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    /// Class names in label order; empty for segmentation sets.
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    id: String,
    planar: bool,
    class: Option<usize>,
    value_range: Option<(f32, f32)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        if self.class_names.is_empty() {
            2
        } else {
            self.class_names.len()
        }
    }

    /// Fraction of the most frequent class label.
    pub fn majority_fraction(&self) -> f64 {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            if let Some(c) = s.class() {
                *counts.entry(c).or_insert(0usize) += 1;
            }
        }
        let n: usize = counts.values().sum();
        if n == 0 {
            return 0.0;
        }
        *counts.values().max().unwrap() as f64 / n as f64
    }

    /// Splits off every `k`-th sample (by index) as a held-out set.
    pub fn split_every(&self, k: usize) -> (Dataset, Dataset) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                b.push(s.clone());
            } else {
                a.push(s.clone());
            }
        }
        let wrap = |samples| Dataset {
            samples,
            class_names: self.class_names.clone(),
        };
        (wrap(a), wrap(b))
    }

    /// Stores the dataset in the checkpoint container.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut metas = Vec::with_capacity(self.len());
        let fp = Fingerprint::new(Family::Resnet18, Stem::K7, Layout::Dataset, false);
        let mut ckpt = Checkpoint::new(fp);
        for (i, s) in self.samples.iter().enumerate() {
            let (tensor, planar, value_range) = match &s.input {
                Input::Planar(p) => (p.tensor().clone(), true, Some(p.value_range())),
                Input::Volume(v) => (v.tensor().clone(), false, None),
            };
            ckpt.insert(format!("sample{i}.input"), tensor)?;
            if let Label::Mask(m) = &s.label {
                ckpt.insert(format!("sample{i}.mask"), m.tensor().clone())?;
            }
            metas.push(SampleMeta {
                id: s.id.clone(),
                planar,
                class: s.class(),
                value_range,
            });
        }
        let fp = ckpt.fingerprint_mut();
        fp.meta.insert("samples".into(), serde_json::to_string(&metas)?);
        fp.meta.insert("class_names".into(), serde_json::to_string(&self.class_names)?);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let fp = ckpt.fingerprint();
        if fp.layout != Layout::Dataset {
            return Err(Error::Data(format!("checkpoint layout {:?} is not a dataset", fp.layout)));
        }
        let field = |k: &str| fp.meta.get(k).ok_or_else(|| Error::Data(format!("dataset lacks `{k}`")));
        let metas: Vec<SampleMeta> = serde_json::from_str(field("samples")?)?;
        let class_names: Vec<String> = serde_json::from_str(field("class_names")?)?;
        let mut samples = Vec::with_capacity(metas.len());
        for (i, m) in metas.into_iter().enumerate() {
            let t = ckpt
                .get(&format!("sample{i}.input"))
                .ok_or_else(|| Error::Data(format!("sample {i} has no input tensor")))?
                .clone();
            let input = if m.planar {
                Input::Planar(PlanarImage::new(t, m.value_range.unwrap_or((0.0, 1.0)))?)
            } else {
                Input::Volume(Volume::new(t)?)
            };
            let label = match (m.class, ckpt.get(&format!("sample{i}.mask"))) {
                (Some(c), _) => Label::Class(c),
                (None, Some(mask)) => Label::Mask(Volume::new(mask.clone())?),
                (None, None) => return Err(Error::Data(format!("sample {i} has no label"))),
            };
            samples.push(LabeledSample::new(input, label, m.id)?);
        }
        Ok(Self { samples, class_names })
    }
}

/// Stacks sample volumes into an `(N, C, D, H, W)` batch.
pub fn stack_volumes(volumes: &[&Volume]) -> Result<Tensor> {
    let ts: Vec<&Tensor> = volumes.iter().map(|v| v.tensor()).collect();
    Tensor::stack(&ts).map_err(|e| Error::Data(format!("batch samples differ in shape: {e}")))
}
