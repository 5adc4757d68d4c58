//! Weight-free description of a backbone.
//!
//! The plan is the single source for parameter names, tensor shapes, output
//! shapes, parameter counts and multiply-accumulate counts. Model construction,
//! checkpoint manifests and conversions all read from it.

use crate::error::{Error, Result};
use crate::tensor::fmt_shape;

use super::config::{BackboneConfig, NormKind, Stem};

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    fn new(name: String, in_ch: usize, out_ch: usize, k: usize, stride: [usize; 3], kd: usize) -> Self {
        Self {
            name,
            in_ch,
            out_ch,
            kernel: [kd, k, k],
            stride,
            padding: [(kd - 1) / 2, (k - 1) / 2, (k - 1) / 2],
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kernel[0], self.kernel[1], self.kernel[2]]
    }

    pub fn param_count(&self) -> u64 {
        (self.out_ch * self.in_ch * self.kernel.iter().product::<usize>()) as u64
    }

    pub fn out_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        window_out(&self.name, input, self.kernel, self.stride, self.padding)
    }

    pub fn macs(&self, out: [usize; 3]) -> u64 {
        let out_numel: usize = out.iter().product();
        (out_numel * self.out_ch) as u64 * (self.in_ch * self.kernel.iter().product::<usize>()) as u64
    }
}

pub(crate) fn window_out(
    name: &str,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = input[a] + 2 * padding[a];
        if padded < kernel[a] {
            return Err(Error::ShapeUnderflow(format!(
                "{name}: input {} with kernel {} and padding {} leaves no output along axis {a}",
                fmt_shape(&input),
                fmt_shape(&kernel),
                fmt_shape(&padding),
            )));
        }
        out[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormSpec {
    pub name: String,
    pub channels: usize,
    pub kind: NormKind,
}

impl NormSpec {
    /// `(suffix, learnable)` of each tensor in manifest order.
    pub fn tensors(&self) -> &'static [(&'static str, bool)] {
        match self.kind {
            NormKind::Batch => &[
                ("weight", true),
                ("bias", true),
                ("running_mean", false),
                ("running_var", false),
            ],
            NormKind::Group(_) => &[("weight", true), ("bias", true)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNormSpec {
    pub conv: ConvSpec,
    pub norm: NormSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub units: Vec<ConvNormSpec>,
    pub downsample: Option<ConvNormSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchPlan {
    pub stem: Vec<ConvNormSpec>,
    pub pool: PoolSpec,
    pub stages: Vec<Vec<BlockSpec>>,
    pub stage_channels: [usize; 4],
}

/// One row of a parameter manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub learnable: bool,
}

impl ArchPlan {
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let kd = |k: usize| config.kernel_depth.for_spatial(k);
        let unit = |name: &str, norm_name: &str, in_ch, out_ch, k, stride: [usize; 3]| ConvNormSpec {
            conv: ConvSpec::new(format!("{BACKBONE_PREFIX}{name}"), in_ch, out_ch, k, stride, kd(k)),
            norm: NormSpec {
                name: format!("{BACKBONE_PREFIX}{norm_name}"),
                channels: out_ch,
                kind: config.norm,
            },
        };

        let width = config.base_width;
        let stem_stride = config.stage_strides[0].as_array();
        let stem = match config.stem {
            Stem::K7 => vec![unit("stem.conv1", "stem.bn1", config.in_channels, width, 7, stem_stride)],
            Stem::V1c => {
                let half = width / 2;
                vec![
                    unit("stem.conv1", "stem.bn1", config.in_channels, half, 3, stem_stride),
                    unit("stem.conv2", "stem.bn2", half, half, 3, [1, 1, 1]),
                    unit("stem.conv3", "stem.bn3", half, width, 3, [1, 1, 1]),
                ]
            }
        };
        let pool = PoolSpec {
            kernel: [1, 3, 3],
            stride: config.stage_strides[1].as_array(),
            padding: [0, 1, 1],
        };

        let expansion = config.family.expansion();
        let mut in_ch = width;
        let mut stages = Vec::with_capacity(4);
        let mut stage_channels = [0; 4];
        for (s, &nblocks) in config.family.blocks_per_stage().iter().enumerate() {
            let planes = width << s;
            let out_ch = planes * expansion;
            let stride = if s == 0 { [1, 1, 1] } else { config.stage_strides[s + 1].as_array() };
            let mut blocks = Vec::with_capacity(nblocks);
            for b in 0..nblocks {
                let block_stride = if b == 0 { stride } else { [1, 1, 1] };
                let p = |part: &str| format!("layer{}.{}.{}", s + 1, b, part);
                let units = if config.family.bottleneck() {
                    vec![
                        unit(&p("conv1"), &p("bn1"), in_ch, planes, 1, [1, 1, 1]),
                        unit(&p("conv2"), &p("bn2"), planes, planes, 3, block_stride),
                        unit(&p("conv3"), &p("bn3"), planes, out_ch, 1, [1, 1, 1]),
                    ]
                } else {
                    vec![
                        unit(&p("conv1"), &p("bn1"), in_ch, planes, 3, block_stride),
                        unit(&p("conv2"), &p("bn2"), planes, planes, 3, [1, 1, 1]),
                    ]
                };
                let downsample = (block_stride != [1, 1, 1] || in_ch != out_ch)
                    .then(|| unit(&p("downsample.0"), &p("downsample.1"), in_ch, out_ch, 1, block_stride));
                blocks.push(BlockSpec { units, downsample });
                in_ch = out_ch;
            }
            stage_channels[s] = out_ch;
            stages.push(blocks);
        }

        let plan = Self {
            stem,
            pool,
            stages,
            stage_channels,
        };
        if let NormKind::Group(g) = config.norm {
            for u in plan.units() {
                if u.norm.channels % g != 0 {
                    return Err(Error::Config(format!(
                        "{} has {} channels, not divisible into {g} groups",
                        u.norm.name, u.norm.channels
                    )));
                }
            }
        }
        Ok(plan)
    }

    /// Every conv+norm unit in forward order (stem, then blocks; the
    /// downsample path follows its block's main path).
    pub fn units(&self) -> impl Iterator<Item = &ConvNormSpec> {
        self.stem.iter().chain(
            self.stages
                .iter()
                .flatten()
                .flat_map(|b| b.units.iter().chain(b.downsample.iter())),
        )
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        for u in self.units() {
            out.push(ManifestEntry {
                name: u.conv.weight_name(),
                shape: u.conv.weight_shape(),
                learnable: true,
            });
            for (suffix, learnable) in u.norm.tensors() {
                out.push(ManifestEntry {
                    name: format!("{}.{suffix}", u.norm.name),
                    shape: vec![u.norm.channels],
                    learnable: *learnable,
                });
            }
        }
        out
    }

    pub fn final_channels(&self) -> usize {
        self.stage_channels[3]
    }

    /// Learnable scalars in the backbone (norm running statistics excluded).
    pub fn param_count(&self) -> u64 {
        self.manifest()
            .iter()
            .filter(|e| e.learnable)
            .map(|e| e.shape.iter().product::<usize>() as u64)
            .sum()
    }

    /// Output shape `(C, D, H, W)` of each of the four residual stages.
    pub fn infer_shapes(&self, input: [usize; 4]) -> Result<Vec<[usize; 4]>> {
        Ok(self.trace(input)?.0)
    }

    /// Multiply-accumulate count of all convolutions for one input.
    pub fn conv_macs(&self, input: [usize; 4]) -> Result<u64> {
        Ok(self.trace(input)?.1)
    }

    fn trace(&self, input: [usize; 4]) -> Result<(Vec<[usize; 4]>, u64)> {
        let [c, d, h, w] = input;
        if input.contains(&0) {
            return Err(Error::ShapeUnderflow(format!(
                "input {} has an empty axis",
                fmt_shape(&input)
            )));
        }
        let expected_in = self.stem[0].conv.in_ch;
        if c != expected_in {
            return Err(Error::shape(
                format!("{expected_in} input channels"),
                format!("{c} channels in {}", fmt_shape(&input)),
            ));
        }
        let mut macs = 0u64;
        let mut dims = [d, h, w];
        for u in &self.stem {
            dims = u.conv.out_dims(dims)?;
            macs += u.conv.macs(dims);
        }
        dims = window_out("stem.pool", dims, self.pool.kernel, self.pool.stride, self.pool.padding)?;
        let mut shapes = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                let block_in = dims;
                for u in &block.units {
                    dims = u.conv.out_dims(dims)?;
                    macs += u.conv.macs(dims);
                }
                if let Some(ds) = &block.downsample {
                    let ds_dims = ds.conv.out_dims(block_in)?;
                    if ds_dims != dims {
                        return Err(Error::shape(
                            format!("shortcut {} matching {}", ds.conv.name, fmt_shape(&dims)),
                            fmt_shape(&ds_dims),
                        ));
                    }
                    macs += ds.conv.macs(ds_dims);
                }
            }
            shapes.push([self.stage_channels[s], dims[0], dims[1], dims[2]]);
        }
        Ok((shapes, macs))
    }
}
