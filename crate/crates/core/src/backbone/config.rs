use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::DepthPadding;

/// Per-axis down-sampling ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stride3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Stride3 {
    pub const ONE: Self = Self::new(1, 1, 1);

    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn planar(s: usize) -> Self {
        Self::new(1, s, s)
    }

    pub const fn cubic(s: usize) -> Self {
        Self::new(s, s, s)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Resnet18,
    Resnet34,
    Resnet50,
}

impl Family {
    pub fn blocks_per_stage(&self) -> [usize; 4] {
        match self {
            Family::Resnet18 => [2, 2, 2, 2],
            Family::Resnet34 | Family::Resnet50 => [3, 4, 6, 3],
        }
    }

    pub fn bottleneck(&self) -> bool {
        matches!(self, Family::Resnet50)
    }

    pub fn expansion(&self) -> usize {
        if self.bottleneck() {
            4
        } else {
            1
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Family::Resnet18 => 18,
            Family::Resnet34 => 34,
            Family::Resnet50 => 50,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "resnet{}", self.depth())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18" | "18" => Ok(Family::Resnet18),
            "resnet34" | "34" => Ok(Family::Resnet34),
            "resnet50" | "50" => Ok(Family::Resnet50),
            other => Err(Error::Config(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// One 7x7 convolution.
    K7,
    /// Three 3x3 convolutions (the "V1c" deep stem).
    V1c,
}

impl fmt::Display for Stem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stem::K7 => "k7",
            Stem::V1c => "v1c",
        })
    }
}

impl FromStr for Stem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k7" => Ok(Stem::K7),
            "v1c" => Ok(Stem::V1c),
            other => Err(Error::Config(format!("unknown stem `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Group(usize),
}

/// How far each convolution kernel extends along depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelDepth {
    /// Cubic kernels: a k x k convolution becomes k x k x k.
    Native,
    /// Every kernel has the given depth (1 gives a planar network).
    Fixed(usize),
}

impl KernelDepth {
    pub fn for_spatial(&self, k: usize) -> usize {
        match *self {
            KernelDepth::Native => k,
            KernelDepth::Fixed(d) => d,
        }
    }
}

/// Declarative description of a residual backbone.
///
/// `stage_strides` holds five entries: stem convolution, stem max-pool, and the
/// first blocks of stages 2, 3 and 4. Stage 1 never down-samples.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub family: Family,
    pub stem: Stem,
    pub depth_preserve: bool,
    pub stage_strides: Vec<Stride3>,
    pub norm: NormKind,
    pub in_channels: usize,
    #[serde(default = "default_width")]
    pub base_width: usize,
    #[serde(default = "default_kernel_depth")]
    pub kernel_depth: KernelDepth,
    #[serde(default = "default_depth_padding")]
    pub depth_padding: DepthPadding,
}

fn default_width() -> usize {
    64
}

fn default_kernel_depth() -> KernelDepth {
    KernelDepth::Native
}

fn default_depth_padding() -> DepthPadding {
    DepthPadding::Zeros
}

pub const NUM_STRIDES: usize = 5;

impl BackboneConfig {
    /// Depth-preserving 3D backbone for pseudo-3D inputs: every depth stride is 1,
    /// height and width follow the usual ResNet schedule.
    pub fn modified(family: Family) -> Self {
        Self {
            family,
            stem: Stem::K7,
            depth_preserve: true,
            stage_strides: vec![Stride3::planar(2); NUM_STRIDES],
            norm: NormKind::Batch,
            in_channels: 1,
            base_width: 64,
            kernel_depth: KernelDepth::Native,
            depth_padding: DepthPadding::Zeros,
        }
    }

    /// Vanilla 3D backbone that down-samples all three axes.
    pub fn vanilla(family: Family) -> Self {
        Self {
            depth_preserve: false,
            stage_strides: vec![Stride3::cubic(2); NUM_STRIDES],
            ..Self::modified(family)
        }
    }

    /// Planar (2D) reference network expressed with depth-1 kernels on RGB input.
    pub fn planar(family: Family) -> Self {
        Self {
            in_channels: 3,
            kernel_depth: KernelDepth::Fixed(1),
            ..Self::modified(family)
        }
    }

    /// Lesion-detection backbone on nine-slice input: stage depths 9, 5, 3, 1.
    pub fn detection(family: Family) -> Self {
        Self {
            depth_preserve: false,
            stage_strides: vec![
                Stride3::planar(2),
                Stride3::planar(2),
                Stride3::cubic(2),
                Stride3::cubic(2),
                Stride3::new(3, 2, 2),
            ],
            ..Self::modified(family)
        }
    }

    pub fn with_stem(mut self, stem: Stem) -> Self {
        self.stem = stem;
        self
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.base_width = width;
        self
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    pub fn with_kernel_depth(mut self, kd: KernelDepth) -> Self {
        self.kernel_depth = kd;
        self
    }

    pub fn with_depth_padding(mut self, p: DepthPadding) -> Self {
        self.depth_padding = p;
        self
    }

    pub fn with_strides(mut self, strides: Vec<Stride3>) -> Self {
        self.stage_strides = strides;
        self
    }

    /// Sets every depth stride to 1 and marks the config depth-preserving.
    pub fn preserving_depth(mut self) -> Self {
        for s in &mut self.stage_strides {
            s.d = 1;
        }
        self.depth_preserve = true;
        self
    }

    pub fn is_planar(&self) -> bool {
        self.kernel_depth == KernelDepth::Fixed(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_strides.len() != NUM_STRIDES {
            return Err(Error::Config(format!(
                "{} needs {NUM_STRIDES} stride entries (stem conv, stem pool, stages 2-4), got {}",
                self.family,
                self.stage_strides.len()
            )));
        }
        for (i, s) in self.stage_strides.iter().enumerate() {
            if s.d == 0 || s.h == 0 || s.w == 0 {
                return Err(Error::Config(format!("stride entry {i} has a zero component")));
            }
            if self.depth_preserve && s.d != 1 {
                return Err(Error::Config(format!(
                    "depth-preserving config has depth stride {} at entry {i}",
                    s.d
                )));
            }
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        let min_width = if self.stem == Stem::V1c { 2 } else { 1 };
        if self.base_width < min_width {
            return Err(Error::Config(format!(
                "base width {} too small for {} stem",
                self.base_width, self.stem
            )));
        }
        if let KernelDepth::Fixed(k) = self.kernel_depth {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("kernel depth must be odd, got {k}")));
            }
        }
        if let NormKind::Group(g) = self.norm {
            if g == 0 {
                return Err(Error::Config("group norm needs at least one group".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Stable hex digest of the serialized config.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Parses architecture names such as `resnet18` (planar) or `resnet3d50`.
pub fn parse_arch(name: &str) -> Result<(Family, bool)> {
    let lower = name.to_ascii_lowercase();
    if let Some(rest) = lower.strip_prefix("resnet3d") {
        let rest = rest.trim_start_matches('-').trim_start_matches("v1c-");
        return Ok((rest.parse()?, true));
    }
    if let Some(rest) = lower.strip_prefix("resnet") {
        return Ok((rest.trim_start_matches('-').parse()?, false));
    }
    Err(Error::Config(format!("unknown architecture `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for f in [Family::Resnet18, Family::Resnet34, Family::Resnet50] {
            BackboneConfig::modified(f).validate().unwrap();
            BackboneConfig::vanilla(f).validate().unwrap();
            BackboneConfig::planar(f).validate().unwrap();
            BackboneConfig::detection(f).validate().unwrap();
        }
    }

    #[test]
    fn depth_preserve_rejects_depth_stride() {
        let mut c = BackboneConfig::modified(Family::Resnet18);
        c.stage_strides[2].d = 2;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stride_count_must_match_topology() {
        let mut c = BackboneConfig::vanilla(Family::Resnet18);
        c.stage_strides.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn even_kernel_depth_rejected() {
        let c = BackboneConfig::modified(Family::Resnet18).with_kernel_depth(KernelDepth::Fixed(2));
        assert!(c.validate().is_err());
    }

    #[test]
    fn arch_names() {
        assert_eq!(parse_arch("resnet3d18").unwrap(), (Family::Resnet18, true));
        assert_eq!(parse_arch("resnet50").unwrap(), (Family::Resnet50, false));
        assert!(parse_arch("vgg16").is_err());
    }

    #[test]
    fn json_round_trip_and_hash() {
        let c = BackboneConfig::detection(Family::Resnet34).with_norm(NormKind::Group(32));
        let back = BackboneConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
        assert_ne!(c.config_hash(), BackboneConfig::vanilla(Family::Resnet34).config_hash());
    }
}
