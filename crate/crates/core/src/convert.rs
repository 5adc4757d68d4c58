//! Weight conversion between planar, depth-preserving and vanilla 3D networks.
//!
//! * transplant: copy every backbone convolution and norm tensor verbatim into
//!   a 3D backbone of the same family whose stride schedule may differ;
//! * inflation: repeat each planar kernel `k` times along depth (optionally
//!   scaled by `1/k`);
//! * zero-pad extension: put the planar kernel at the centre depth slice;
//! * axial/coronal/sagittal split: partition output channels into three
//!   groups, each convolving in a different anatomical plane.
//!
//! Every conversion returns a [`ConversionReport`] alongside the checkpoint.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::model::{config_fingerprint, embedded_config, META_HEAD};
use crate::backbone::{ArchPlan, BackboneConfig, KernelDepth, BACKBONE_PREFIX};
use crate::checkpoint::{Checkpoint, Fingerprint, Layout};
use crate::error::{Error, Result};
use crate::nn::{conv3d_forward, ConvGeometry, DepthPadding};
use crate::tensor::{fmt_shape, Tensor};
use crate::vardim::Volume;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InflateScale {
    /// Divide every repeated slice by `k`, preserving activations on
    /// depth-constant inputs.
    #[default]
    InvK,
    None,
}

impl std::str::FromStr for InflateScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invk" => Ok(Self::InvK),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown scale `{other}` (expected invk or none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConversionRule {
    SvdTransplant { target: BackboneConfig },
    I3dInflate { k: usize, scale: InflateScale },
    ZeropadExtend { k: usize },
    AcsSplit,
}

impl ConversionRule {
    /// Builds a rule from its kind name and string options (`k`, `scale`).
    /// The transplant target is supplied separately because it is a whole config.
    pub fn parse(kind: &str, options: &BTreeMap<String, String>, target: Option<BackboneConfig>) -> Result<Self> {
        let k = || -> Result<usize> {
            let raw = options.get("k").map(String::as_str).unwrap_or("3");
            raw.parse()
                .map_err(|_| Error::Config(format!("option k must be a positive integer, got `{raw}`")))
        };
        let rule = match kind {
            "svd" | "svd_transplant" => Self::SvdTransplant {
                target: target.ok_or_else(|| Error::Config("transplant needs a target config".into()))?,
            },
            "i3d" | "i3d_inflate" => Self::I3dInflate {
                k: k()?,
                scale: options.get("scale").map(|s| s.parse()).transpose()?.unwrap_or_default(),
            },
            "zeropad" | "zeropad_extend" => Self::ZeropadExtend { k: k()? },
            "acs" | "acs_split" => Self::AcsSplit,
            other => {
                return Err(Error::Config(format!(
                    "unknown conversion rule `{other}` (expected svd, i3d, zeropad or acs)"
                )))
            }
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::SvdTransplant { target } => target.validate(),
            Self::I3dInflate { k, .. } | Self::ZeropadExtend { k } => check_k(*k),
            Self::AcsSplit => Ok(()),
        }
    }

    pub fn apply(&self, source: &Checkpoint) -> Result<(Checkpoint, ConversionReport)> {
        match self {
            Self::SvdTransplant { target } => transplant_svd(source, target),
            Self::I3dInflate { k, scale } => inflate_i3d(source, *k, *scale),
            Self::ZeropadExtend { k } => extend_zeropad(source, *k),
            Self::AcsSplit => acs_split(source),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transformed {
    pub source: String,
    pub source_shape: Vec<usize>,
    pub target: String,
    pub target_shape: Vec<usize>,
}

/// What happened to every tensor of the source and target namespaces.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub rule: String,
    /// Copied verbatim under the same name.
    pub matched: Vec<String>,
    pub transformed: Vec<Transformed>,
    pub unmatched_source: Vec<String>,
    pub unmatched_target: Vec<String>,
}

impl ConversionReport {
    fn new(rule: &str) -> Self {
        Self {
            rule: rule.into(),
            ..Self::default()
        }
    }

    /// True when the report accounts for each source and target name exactly once.
    pub fn partitions(&self, source: &Checkpoint, target: &Checkpoint) -> bool {
        let mut src: Vec<&str> = self
            .matched
            .iter()
            .chain(&self.unmatched_source)
            .map(String::as_str)
            .collect();
        let mut seen_sources: Vec<&str> = self.transformed.iter().map(|t| t.source.as_str()).collect();
        seen_sources.dedup();
        src.extend(seen_sources);
        let mut dst: Vec<&str> = self
            .matched
            .iter()
            .chain(&self.unmatched_target)
            .map(String::as_str)
            .chain(self.transformed.iter().map(|t| t.target.as_str()))
            .collect();
        let mut want_src: Vec<&str> = source.names().collect();
        let mut want_dst: Vec<&str> = target.names().collect();
        for v in [&mut src, &mut dst, &mut want_src, &mut want_dst] {
            v.sort_unstable();
        }
        src == want_src && dst == want_dst
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for ConversionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rule: {}", self.rule)?;
        writeln!(f, "matched: {}", self.matched.len())?;
        writeln!(f, "transformed: {}", self.transformed.len())?;
        for t in &self.transformed {
            writeln!(
                f,
                "  {} {} -> {} {}",
                t.source,
                fmt_shape(&t.source_shape),
                t.target,
                fmt_shape(&t.target_shape)
            )?;
        }
        writeln!(f, "unmatched_source: {}", self.unmatched_source.len())?;
        for n in &self.unmatched_source {
            writeln!(f, "  {n}")?;
        }
        writeln!(f, "unmatched_target: {}", self.unmatched_target.len())?;
        for n in &self.unmatched_target {
            writeln!(f, "  {n}")?;
        }
        Ok(())
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Config(format!("k must be odd and at least 1, got {k}")));
    }
    Ok(())
}

fn is_conv_weight(name: &str, t: &Tensor) -> bool {
    name.starts_with(BACKBONE_PREFIX) && name.ends_with(".weight") && t.ndim() >= 4
}

// ---------------------------------------------------------------------------
// transplant

/// Copies the backbone of `source` into a backbone built from `target`.
///
/// Tensors are paired by position in the two manifests, never by name
/// heuristics. Stride and pooling settings are free to differ; every tensor
/// shape must agree. Task heads of the source are reported as unmatched.
pub fn transplant_svd(source: &Checkpoint, target: &BackboneConfig) -> Result<(Checkpoint, ConversionReport)> {
    let fp = source.fingerprint();
    if fp.family != target.family {
        return Err(Error::IncompatibleArchitecture(format!(
            "source family {} cannot be transplanted into {}",
            fp.family, target.family
        )));
    }
    if matches!(fp.layout, Layout::Acs | Layout::Dataset) {
        return Err(Error::IncompatibleArchitecture(format!(
            "source layout {:?} is not a backbone",
            fp.layout
        )));
    }
    let manifest = ArchPlan::new(target)?.manifest();
    let src: Vec<(&str, &Tensor)> = source.iter().filter(|(n, _)| n.starts_with(BACKBONE_PREFIX)).collect();
    if src.len() != manifest.len() {
        return Err(Error::IncompatibleArchitecture(format!(
            "source backbone has {} tensors, target manifest has {} (stem {} vs {})",
            src.len(),
            manifest.len(),
            fp.stem,
            target.stem
        )));
    }
    let mut diffs = Vec::new();
    for ((name, t), entry) in src.iter().zip(&manifest) {
        if *name != entry.name {
            return Err(Error::IncompatibleArchitecture(format!(
                "manifest position mismatch: source `{name}` vs target `{}`",
                entry.name
            )));
        }
        if t.shape() != entry.shape.as_slice() {
            diffs.push(format!(
                "  {name}: source {} vs target {}",
                fmt_shape(t.shape()),
                fmt_shape(&entry.shape)
            ));
        }
    }
    if !diffs.is_empty() {
        return Err(Error::ShapeDiff(format!(
            "{} tensors differ in shape:\n{}",
            diffs.len(),
            diffs.join("\n")
        )));
    }

    let mut out = Checkpoint::new(config_fingerprint(target, None));
    let mut report = ConversionReport::new("svd_transplant");
    for (name, t) in &src {
        out.insert(*name, (*t).clone())?;
        report.matched.push(name.to_string());
    }
    report.unmatched_source = source
        .names()
        .filter(|n| !n.starts_with(BACKBONE_PREFIX))
        .map(String::from)
        .collect();
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// planar to volumetric kernels

fn planar_source(source: &Checkpoint) -> Result<BackboneConfig> {
    let fp = source.fingerprint();
    if fp.layout != Layout::Chw {
        return Err(Error::IncompatibleArchitecture(format!(
            "expected a planar (chw) checkpoint, found layout {:?}",
            fp.layout
        )));
    }
    embedded_config(fp)
}

fn volumetric_fingerprint(source: &Fingerprint, config: &BackboneConfig) -> Fingerprint {
    let mut fp = config_fingerprint(config, None);
    if let Some(head) = source.meta.get(META_HEAD) {
        fp = fp.with_meta(META_HEAD, head.clone());
    }
    fp
}

/// Shared driver: every 4-axis backbone weight goes through `lift`, everything
/// else is copied.
fn lift_planar(
    source: &Checkpoint,
    k: usize,
    depth_padding: DepthPadding,
    rule: &str,
    lift: impl Fn(&Tensor) -> Tensor,
) -> Result<(Checkpoint, ConversionReport)> {
    check_k(k)?;
    let mut config = planar_source(source)?;
    config.kernel_depth = KernelDepth::Fixed(k);
    config.depth_padding = depth_padding;
    let mut out = Checkpoint::new(volumetric_fingerprint(source.fingerprint(), &config));
    let mut report = ConversionReport::new(rule);
    for (name, t) in source.iter() {
        if is_conv_weight(name, t) && t.ndim() == 4 {
            let lifted = lift(t);
            report.transformed.push(Transformed {
                source: name.into(),
                source_shape: t.shape().to_vec(),
                target: name.into(),
                target_shape: lifted.shape().to_vec(),
            });
            out.insert(name, lifted)?;
        } else {
            out.insert(name, t.clone())?;
            report.matched.push(name.into());
        }
    }
    Ok((out, report))
}

fn add_depth(w: &Tensor, k: usize, place: impl Fn(usize, f32) -> f32) -> Tensor {
    let s = w.shape();
    let (oi, hw) = (s[0] * s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(oi * k * hw);
    for plane in w.data().chunks(hw) {
        for d in 0..k {
            data.extend(plane.iter().map(|&v| place(d, v)));
        }
    }
    debug_assert_eq!(data.len(), oi * k * hw);
    Tensor::from_vec(&[s[0], s[1], k, s[2], s[3]], data).expect("inflated shape")
}

/// Repeats every planar kernel `k` times along a new depth axis.
///
/// The result is a depth-preserving backbone with depth kernels of size `k`
/// and replicate depth padding, so that on inputs whose depth slices are all
/// equal every output slice equals the planar network's output.
pub fn inflate_i3d(source: &Checkpoint, k: usize, scale: InflateScale) -> Result<(Checkpoint, ConversionReport)> {
    let factor = match scale {
        InflateScale::InvK => 1.0 / k as f32,
        InflateScale::None => 1.0,
    };
    lift_planar(source, k, DepthPadding::Replicate, "i3d_inflate", |w| {
        add_depth(w, k, |_, v| v * factor)
    })
}

/// Places every planar kernel at the centre depth slice, zeros elsewhere.
pub fn extend_zeropad(source: &Checkpoint, k: usize) -> Result<(Checkpoint, ConversionReport)> {
    let centre = k / 2;
    lift_planar(source, k, DepthPadding::Zeros, "zeropad_extend", |w| {
        add_depth(w, k, |d, v| if d == centre { v } else { 0.0 })
    })
}

// ---------------------------------------------------------------------------
// axial / coronal / sagittal

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Axial,
    Coronal,
    Sagittal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Coronal, View::Sagittal];

    pub fn name(&self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Coronal => "coronal",
            View::Sagittal => "sagittal",
        }
    }

    /// 3D kernel extents for a planar `kh x kw` kernel.
    pub fn kernel(&self, kh: usize, kw: usize) -> [usize; 3] {
        match self {
            View::Axial => [1, kh, kw],
            View::Coronal => [kh, 1, kw],
            View::Sagittal => [kh, kw, 1],
        }
    }
}

/// Output-channel group sizes: `ceil(C/3)`, then half of the rest rounded up,
/// then the remainder.
pub fn acs_partition(channels: usize) -> [usize; 3] {
    let a = channels.div_ceil(3);
    let b = (channels - a).div_ceil(2);
    [a, b, channels - a - b]
}

/// The three view kernels of one split convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AcsConvParams {
    /// `(g_v, C_in, kd, kh, kw)` per view, in axial, coronal, sagittal order.
    pub weights: [Tensor; 3],
    pub stride: [usize; 3],
    /// Planar padding `(ph, pw)`; applied to the two in-plane axes of each view.
    pub planar_padding: [usize; 2],
}

impl AcsConvParams {
    pub fn split(name: &str, weight2d: &Tensor, stride: [usize; 3]) -> Result<Self> {
        let s = weight2d.shape();
        if s.len() != 4 {
            return Err(Error::shape("(out, in, kh, kw) kernel", fmt_shape(s)));
        }
        let (cout, cin, kh, kw) = (s[0], s[1], s[2], s[3]);
        if cout < 3 {
            return Err(Error::Unsplittable {
                name: name.into(),
                channels: cout,
            });
        }
        let groups = acs_partition(cout);
        let per_out = cin * kh * kw;
        let mut start = 0;
        let weights = std::array::from_fn(|g| {
            let n = groups[g];
            let k = View::ALL[g].kernel(kh, kw);
            let data = weight2d.data()[start * per_out..(start + n) * per_out].to_vec();
            start += n;
            Tensor::from_vec(&[n, cin, k[0], k[1], k[2]], data).expect("view reshape keeps size")
        });
        Ok(Self {
            weights,
            stride,
            planar_padding: [(kh - 1) / 2, (kw - 1) / 2],
        })
    }

    pub fn group_sizes(&self) -> [usize; 3] {
        std::array::from_fn(|g| self.weights[g].shape()[0])
    }

    pub fn in_channels(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn geometry(&self, view: View) -> ConvGeometry {
        let [ph, pw] = self.planar_padding;
        let padding = match view {
            View::Axial => [0, ph, pw],
            View::Coronal => [ph, 0, pw],
            View::Sagittal => [ph, pw, 0],
        };
        ConvGeometry {
            stride: self.stride,
            padding,
            depth_padding: DepthPadding::Zeros,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }
}

/// Runs the three view convolutions and concatenates them along channels.
pub fn acs_conv_forward(x: &Volume, params: &AcsConvParams) -> Result<Volume> {
    let [c, d, h, w] = x.dims();
    if c != params.in_channels() {
        return Err(Error::shape(
            format!("{} input channels", params.in_channels()),
            fmt_shape(&[c, d, h, w]),
        ));
    }
    let batch = x.tensor().clone().reshape(&[1, c, d, h, w])?;
    let outs = View::ALL
        .iter()
        .zip(&params.weights)
        .filter(|(_, wt)| wt.shape()[0] > 0)
        .map(|(v, wt)| conv3d_forward(&batch, wt, None, &params.geometry(*v)))
        .collect::<Result<Vec<_>>>()?;
    let first = outs[0].shape()[2..].to_vec();
    if let Some(bad) = outs.iter().find(|o| o.shape()[2..] != first[..]) {
        return Err(Error::shape(fmt_shape(&first), fmt_shape(&bad.shape()[2..])));
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    let y = Tensor::cat_channels(&refs)?;
    let s = y.shape().to_vec();
    Volume::new(y.reshape(&s[1..])?)
}

pub fn acs_weight_name(conv_weight: &str, view: View) -> String {
    let stem = conv_weight.strip_suffix(".weight").unwrap_or(conv_weight);
    format!("{stem}.{}.weight", view.name())
}

/// Splits every planar backbone convolution into its three view kernels.
pub fn acs_split(source: &Checkpoint) -> Result<(Checkpoint, ConversionReport)> {
    let config = planar_source(source)?;
    let mut fp = source.fingerprint().clone();
    fp.layout = Layout::Acs;
    fp.depth_preserve = true;
    let mut out = Checkpoint::new(fp);
    let mut report = ConversionReport::new("acs_split");
    let plan = ArchPlan::new(&config)?;
    for (name, t) in source.iter() {
        if is_conv_weight(name, t) {
            let stride = plan
                .units()
                .find(|u| u.conv.weight_name() == name)
                .map(|u| u.conv.stride)
                .unwrap_or([1, 1, 1]);
            let p = AcsConvParams::split(name, t, stride)?;
            for (v, w) in View::ALL.iter().zip(p.weights) {
                let target = acs_weight_name(name, *v);
                report.transformed.push(Transformed {
                    source: name.into(),
                    source_shape: t.shape().to_vec(),
                    target: target.clone(),
                    target_shape: w.shape().to_vec(),
                });
                out.insert(target, w)?;
            }
        } else {
            out.insert(name, t.clone())?;
            report.matched.push(name.into());
        }
    }
    Ok((out, report))
}

/// Reassembles the split convolution stored under `conv_weight` in an ACS
/// checkpoint.
pub fn acs_params_from(ckpt: &Checkpoint, conv_weight: &str, stride: [usize; 3]) -> Result<AcsConvParams> {
    let get = |v: View| {
        let n = acs_weight_name(conv_weight, v);
        ckpt.get(&n)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("missing view kernel `{n}`")))
    };
    let weights = [get(View::Axial)?, get(View::Coronal)?, get(View::Sagittal)?];
    let s = weights[0].shape();
    Ok(AcsConvParams {
        planar_padding: [(s[3] - 1) / 2, (s[4] - 1) / 2],
        weights,
        stride,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneModel, Family, HeadKind, Mode, Stride3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planar_ckpt(width: usize) -> Checkpoint {
        let cfg = BackboneConfig::planar(Family::Resnet18).with_width(width);
        let mut m = build_backbone(&cfg, 1).unwrap();
        m.attach_head(HeadKind::Classify { num_classes: 4 }, 2).unwrap();
        m.to_checkpoint()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn partition_sizes() {
        assert_eq!(acs_partition(64), [22, 21, 21]);
        assert_eq!(acs_partition(3), [1, 1, 1]);
        assert_eq!(acs_partition(4), [2, 1, 1]);
        assert_eq!(acs_partition(5), [2, 2, 1]);
    }

    #[test]
    fn inflate_unit_kernel() {
        let w = Tensor::full(&[1, 1, 1, 1], 6.0);
        let t = add_depth(&w, 3, |_, v| v / 3.0);
        assert_eq!(t.shape(), &[1, 1, 3, 1, 1]);
        assert_eq!(t.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn zeropad_places_centre() {
        let src = planar_ckpt(4);
        let (out, report) = extend_zeropad(&src, 3).unwrap();
        let w2 = src.get("backbone.layer1.0.conv1.weight").unwrap();
        let w3 = out.get("backbone.layer1.0.conv1.weight").unwrap();
        assert_eq!(w3.numel(), 3 * w2.numel());
        for (plane, src_plane) in w3.data().chunks(27).zip(w2.data().chunks(9)) {
            assert!(plane[..9].iter().chain(&plane[18..]).all(|&v| v == 0.0));
            assert_eq!(&plane[9..18], src_plane);
        }
        assert!(report.partitions(&src, &out));
    }

    #[test]
    fn k_one_inflation_is_axis_insertion() {
        let src = planar_ckpt(4);
        let (out, _) = inflate_i3d(&src, 1, InflateScale::InvK).unwrap();
        for (a, b) in src.iter().zip(out.iter()) {
            assert_eq!(a.1.data(), b.1.data());
        }
        assert!(inflate_i3d(&src, 2, InflateScale::InvK).is_err());
    }

    #[test]
    fn inflate_rejects_volumetric_source() {
        let m = build_backbone(&BackboneConfig::modified(Family::Resnet18).with_width(4), 0).unwrap();
        let err = inflate_i3d(&m.to_checkpoint(), 3, InflateScale::InvK).unwrap_err();
        assert!(matches!(err, Error::IncompatibleArchitecture(_)));
    }

    #[test]
    fn transplant_reports_heads_and_is_idempotent() {
        let cfg = BackboneConfig::modified(Family::Resnet18).with_width(4);
        let mut m = build_backbone(&cfg, 0).unwrap();
        m.attach_head(HeadKind::Classify { num_classes: 3 }, 0).unwrap();
        let src = m.to_checkpoint();
        let target = BackboneConfig::vanilla(Family::Resnet18).with_width(4);
        let (once, report) = transplant_svd(&src, &target).unwrap();
        assert_eq!(report.unmatched_source, vec!["adapt.fc.weight", "adapt.fc.bias"]);
        assert!(report.unmatched_target.is_empty());
        assert!(report.partitions(&src, &once));
        let (twice, _) = transplant_svd(&once, &target).unwrap();
        assert_eq!(once.to_bytes(), twice.to_bytes());
    }

    #[test]
    fn transplant_errors() {
        let src = build_backbone(&BackboneConfig::modified(Family::Resnet18).with_width(4), 0)
            .unwrap()
            .to_checkpoint();
        let err = transplant_svd(&src, &BackboneConfig::vanilla(Family::Resnet34).with_width(4)).unwrap_err();
        assert!(matches!(err, Error::IncompatibleArchitecture(_)));
        let err = transplant_svd(&src, &BackboneConfig::vanilla(Family::Resnet18).with_width(8)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("backbone.stem.conv1.weight") && msg.contains("(8, 1, 7, 7, 7)"), "{msg}");
    }

    #[test]
    fn transplant_with_unit_depth_strides_is_equivalent() {
        let cfg = BackboneConfig::modified(Family::Resnet18).with_width(4);
        let src = build_backbone(&cfg, 3).unwrap();
        let mut target = BackboneConfig::vanilla(Family::Resnet18).with_width(4);
        target.stage_strides = vec![Stride3::new(1, 2, 2); 5];
        let (ckpt, _) = transplant_svd(&src.to_checkpoint(), &target).unwrap();
        let dst = BackboneModel::from_checkpoint(&ckpt).unwrap();
        let x = random(&[1, 1, 3, 32, 32], 5);
        let a = src.forward_batch(&x, Mode::Eval).unwrap().stages;
        let b = dst.forward_batch(&x, Mode::Eval).unwrap().stages;
        for (p, q) in a.iter().zip(&b) {
            assert!(p.max_abs_diff(q) < 1e-5);
        }
    }

    #[test]
    fn acs_keeps_param_count_and_names() {
        let src = planar_ckpt(4);
        let (out, report) = acs_split(&src).unwrap();
        assert!(report.partitions(&src, &out));
        assert_eq!(out.total_scalars(), src.total_scalars());
        let p = acs_params_from(&out, "backbone.layer1.0.conv1.weight", [1, 1, 1]).unwrap();
        assert_eq!(p.group_sizes(), [2, 1, 1]);
        assert_eq!(p.weights[1].shape(), &[1, 4, 3, 1, 3]);
    }

    #[test]
    fn acs_needs_three_channels() {
        let err = AcsConvParams::split("w", &Tensor::zeros(&[2, 1, 3, 3]), [1, 1, 1]).unwrap_err();
        assert!(matches!(err, Error::Unsplittable { channels: 2, .. }));
    }

    #[test]
    fn acs_preserves_depth() {
        let p = AcsConvParams::split("w", &random(&[7, 2, 3, 3], 1), [1, 1, 1]).unwrap();
        let x = Volume::new(random(&[2, 4, 5, 6], 2)).unwrap();
        let y = acs_conv_forward(&x, &p).unwrap();
        assert_eq!(y.dims(), [7, 4, 5, 6]);
    }

    #[test]
    fn rule_parsing() {
        let mut opts = BTreeMap::new();
        opts.insert("k".to_string(), "5".to_string());
        opts.insert("scale".to_string(), "none".to_string());
        assert_eq!(
            ConversionRule::parse("i3d", &opts, None).unwrap(),
            ConversionRule::I3dInflate {
                k: 5,
                scale: InflateScale::None
            }
        );
        assert!(ConversionRule::parse("svd", &opts, None).is_err());
        assert!(ConversionRule::parse("bogus", &opts, None).is_err());
    }
}
