//! Residual 3D backbones: configuration, shape calculus, parameters and a
//! trainable runtime.

pub mod config;
pub mod model;
pub mod params;
pub mod plan;

pub use config::{parse_arch, BackboneConfig, Family, KernelDepth, NormKind, Stem, Stride3, NUM_STRIDES};
pub use model::{
    build_backbone, config_fingerprint, count_flops, count_params, embedded_config, infer_shapes, BackboneModel, Forward, Freeze, HeadKind, Mode, Tape,
};
pub use params::{Grads, Param, ParamStore};
pub use plan::{ArchPlan, ManifestEntry, BACKBONE_PREFIX};
