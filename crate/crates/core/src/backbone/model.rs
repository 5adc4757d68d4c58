use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapt::{
    classify_head_backward_slice, classify_head_slice, init_linear, FC_BIAS, FC_WEIGHT, SEG_BIAS, SEG_WEIGHT,
};
use crate::checkpoint::{Checkpoint, Fingerprint, Layout};
use crate::error::{Error, Result};
use crate::nn::norm::{BN_MOMENTUM, NormCache};
use crate::nn::{
    batch_norm_eval, batch_norm_train, conv3d_backward, conv3d_forward, group_norm, max_pool3d,
    max_pool3d_backward, norm_backward, relu_backward, relu_inplace, upsample_nearest,
    upsample_nearest_backward, ConvGeometry,
};
use crate::tensor::{fmt_shape, Tensor};
use crate::vardim::Volume;

use super::config::{BackboneConfig, NormKind};
use super::params::{Grads, ParamStore};
use super::plan::{ArchPlan, ConvNormSpec, PoolSpec};

pub const META_CONFIG: &str = "backbone_config";
pub const META_CONFIG_HASH: &str = "config_hash";
pub const META_HEAD: &str = "head";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameters stay fixed during fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freeze {
    #[default]
    None,
    /// Stem layers and the first residual stage.
    FixRes1,
}

impl Freeze {
    pub fn prefixes(&self) -> &'static [&'static str] {
        match self {
            Freeze::None => &[],
            Freeze::FixRes1 => &["backbone.stem.", "backbone.layer1."],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classify { num_classes: usize },
    /// Two-class voxel logits from the first stage, resized to the input grid.
    Segment,
}

#[derive(Clone, Debug)]
struct NormUnit {
    kind: NormKind,
    gamma: usize,
    beta: usize,
    running: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct Unit {
    weight: usize,
    geom: ConvGeometry,
    norm: NormUnit,
}

#[derive(Clone, Debug)]
struct Block {
    units: Vec<Unit>,
    downsample: Option<Unit>,
}

#[derive(Clone, Debug)]
enum Head {
    Classify { weight: usize, bias: usize, num_classes: usize, channels: usize },
    Segment { weight: usize, bias: usize },
}

struct UnitTape {
    input: Tensor,
    norm: NormCache,
    out: Tensor,
}

struct BlockTape {
    units: Vec<UnitTape>,
    downsample: Option<UnitTape>,
    out: Tensor,
}

struct RunningUpdate {
    mean: usize,
    var: usize,
    batch_mean: Vec<f32>,
    batch_var: Vec<f32>,
}

/// Activations recorded by a forward pass, consumed by [`BackboneModel::backward`].
pub struct Tape {
    stem: Vec<UnitTape>,
    pool_input_shape: Vec<usize>,
    pool_argmax: Vec<usize>,
    blocks: Vec<Vec<BlockTape>>,
    running: Vec<RunningUpdate>,
}

pub struct Forward {
    /// Output of each residual stage, `(N, C, D, H, W)`.
    pub stages: Vec<Tensor>,
    pub tape: Tape,
}

/// A residual backbone with its parameters and an optional task head.
#[derive(Clone, Debug)]
pub struct BackboneModel {
    config: BackboneConfig,
    plan: ArchPlan,
    params: ParamStore,
    stem: Vec<Unit>,
    pool: PoolSpec,
    stages: Vec<Vec<Block>>,
    head: Option<(HeadKind, Head)>,
}

/// Fingerprint of a checkpoint holding a model of `config`.
pub fn config_fingerprint(config: &BackboneConfig, head: Option<HeadKind>) -> Fingerprint {
    let layout = if config.is_planar() { Layout::Chw } else { Layout::Cdhw };
    let mut fp = Fingerprint::new(config.family, config.stem, layout, config.depth_preserve)
        .with_meta(META_CONFIG, config.to_json())
        .with_meta(META_CONFIG_HASH, config.config_hash());
    if let Some(kind) = head {
        fp = fp.with_meta(META_HEAD, serde_json::to_string(&kind).expect("head serializes"));
    }
    fp
}

/// Reads the backbone config embedded in a checkpoint fingerprint.
pub fn embedded_config(fp: &Fingerprint) -> Result<BackboneConfig> {
    let json = fp
        .meta
        .get(META_CONFIG)
        .ok_or_else(|| Error::IncompatibleArchitecture("checkpoint carries no backbone config".into()))?;
    BackboneConfig::from_json(json)
}

/// Builds a backbone with deterministic initialization: Kaiming-normal
/// (fan-out) convolutions, unit norm scale, zero norm shift.
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneModel> {
    BackboneModel::new(config, seed)
}

pub fn infer_shapes(config: &BackboneConfig, input: [usize; 4]) -> Result<Vec<[usize; 4]>> {
    ArchPlan::new(config)?.infer_shapes(input)
}

/// Learnable scalars, including the head when one is attached.
pub fn count_params(model: &BackboneModel) -> u64 {
    model.params.learnable_scalars()
}

/// Multiply-accumulates of every convolution and linear layer for one input
/// `(C, D, H, W)`.
pub fn count_flops(model: &BackboneModel, input: [usize; 4]) -> Result<u64> {
    let mut macs = model.plan.conv_macs(input)?;
    match model.head {
        Some((HeadKind::Classify { num_classes }, _)) => {
            macs += (model.plan.final_channels() * num_classes) as u64;
        }
        Some((HeadKind::Segment, _)) => {
            let s1 = model.plan.infer_shapes(input)?[0];
            macs += (s1[0] * 2 * s1[1] * s1[2] * s1[3]) as u64;
        }
        None => {}
    }
    Ok(macs)
}

impl BackboneModel {
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let plan = ArchPlan::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut make_unit = |spec: &ConvNormSpec, params: &mut ParamStore| -> Unit {
            let fan_out = spec.conv.out_ch * spec.conv.kernel.iter().product::<usize>();
            let std = (2.0 / fan_out as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let shape = spec.conv.weight_shape();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            let weight = params.insert(spec.conv.weight_name(), Tensor::from_vec(&shape, data).expect("shape"), true);
            let c = spec.norm.channels;
            let n = &spec.norm.name;
            let gamma = params.insert(format!("{n}.weight"), Tensor::full(&[c], 1.0), true);
            let beta = params.insert(format!("{n}.bias"), Tensor::zeros(&[c]), true);
            let running = (spec.norm.kind == NormKind::Batch).then(|| {
                let m = params.insert(format!("{n}.running_mean"), Tensor::zeros(&[c]), false);
                let v = params.insert(format!("{n}.running_var"), Tensor::full(&[c], 1.0), false);
                (m, v)
            });
            Unit {
                weight,
                geom: ConvGeometry {
                    stride: spec.conv.stride,
                    padding: spec.conv.padding,
                    depth_padding: config.depth_padding,
                },
                norm: NormUnit {
                    kind: spec.norm.kind,
                    gamma,
                    beta,
                    running,
                },
            }
        };
        let stem = plan.stem.iter().map(|u| make_unit(u, &mut params)).collect();
        let stages = plan
            .stages
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|b| Block {
                        units: b.units.iter().map(|u| make_unit(u, &mut params)).collect(),
                        downsample: b.downsample.as_ref().map(|u| make_unit(u, &mut params)),
                    })
                    .collect()
            })
            .collect();
        debug_assert_eq!(
            params.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>(),
            plan.manifest().into_iter().map(|e| e.name).collect::<Vec<_>>()
        );
        Ok(Self {
            config: config.clone(),
            pool: plan.pool.clone(),
            plan,
            params,
            stem,
            stages,
            head: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn plan(&self) -> &ArchPlan {
        &self.plan
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_kind(&self) -> Option<HeadKind> {
        self.head.as_ref().map(|(k, _)| *k)
    }

    /// Declared output channels of each residual stage.
    pub fn stage_channels(&self) -> [usize; 4] {
        self.plan.stage_channels
    }

    /// Adds a randomly initialized task head, replacing any existing one.
    pub fn attach_head(&mut self, kind: HeadKind, seed: u64) -> Result<()> {
        if self.head.is_some() {
            self.detach_head();
        }
        let head = match kind {
            HeadKind::Classify { num_classes } => {
                if num_classes < 2 {
                    return Err(Error::Config(format!(
                        "classifier needs at least 2 classes, got {num_classes}"
                    )));
                }
                let channels = self.plan.final_channels();
                let (w, b) = init_linear(channels, num_classes, seed);
                let weight = self.params.insert(
                    FC_WEIGHT.into(),
                    Tensor::from_vec(&[num_classes, channels], w.into_iter().map(|v| v as f32).collect())?,
                    true,
                );
                let bias = self.params.insert(
                    FC_BIAS.into(),
                    Tensor::from_vec(&[num_classes], b.into_iter().map(|v| v as f32).collect())?,
                    true,
                );
                Head::Classify {
                    weight,
                    bias,
                    num_classes,
                    channels,
                }
            }
            HeadKind::Segment => {
                let channels = self.plan.stage_channels[0];
                let (w, b) = init_linear(channels, 2, seed);
                let weight = self.params.insert(
                    SEG_WEIGHT.into(),
                    Tensor::from_vec(&[2, channels, 1, 1, 1], w.into_iter().map(|v| v as f32).collect())?,
                    true,
                );
                let bias = self.params.insert(
                    SEG_BIAS.into(),
                    Tensor::from_vec(&[2], b.into_iter().map(|v| v as f32).collect())?,
                    true,
                );
                Head::Segment { weight, bias }
            }
        };
        self.head = Some((kind, head));
        Ok(())
    }

    pub fn detach_head(&mut self) {
        if self.head.take().is_some() {
            // heads are always appended after the backbone manifest
            let keep = self.plan.manifest().len();
            let mut store = ParamStore::new();
            for (i, (name, p)) in self.params.iter().enumerate() {
                if i < keep {
                    let id = store.insert(name.to_string(), p.tensor.clone(), p.learnable);
                    store.param_mut(id).frozen = p.frozen;
                }
            }
            self.params = store;
        }
    }

    pub fn set_freeze(&mut self, freeze: Freeze) -> Vec<String> {
        self.params.freeze_prefixes(freeze.prefixes())
    }

    // -- forward ------------------------------------------------------------

    fn unit_forward(
        &self,
        unit: &Unit,
        x: &Tensor,
        mode: Mode,
        relu: bool,
        running: &mut Vec<RunningUpdate>,
    ) -> Result<UnitTape> {
        let p = &self.params;
        let y = conv3d_forward(x, p.tensor(unit.weight), None, &unit.geom)?;
        let gamma = p.tensor(unit.norm.gamma).data();
        let beta = p.tensor(unit.norm.beta).data();
        let (mut out, cache) = match (unit.norm.kind, unit.norm.running) {
            (NormKind::Group(g), _) => group_norm(&y, g, gamma, beta),
            (NormKind::Batch, Some((m, v))) => {
                if mode == Mode::Train && !p.is_frozen(unit.norm.gamma) {
                    let (out, cache, batch_mean, batch_var) = batch_norm_train(&y, gamma, beta);
                    running.push(RunningUpdate {
                        mean: m,
                        var: v,
                        batch_mean,
                        batch_var,
                    });
                    (out, cache)
                } else {
                    batch_norm_eval(&y, gamma, beta, p.tensor(m).data(), p.tensor(v).data())
                }
            }
            (NormKind::Batch, None) => unreachable!("batch norm always has running statistics"),
        };
        if relu {
            relu_inplace(&mut out);
        }
        Ok(UnitTape {
            input: x.clone(),
            norm: cache,
            out,
        })
    }

    fn block_forward(&self, block: &Block, x: &Tensor, mode: Mode, running: &mut Vec<RunningUpdate>) -> Result<BlockTape> {
        let mut units = Vec::with_capacity(block.units.len());
        let last = block.units.len() - 1;
        for (j, u) in block.units.iter().enumerate() {
            let input = units.last().map_or(x, |t: &UnitTape| &t.out);
            let t = self.unit_forward(u, input, mode, j < last, running)?;
            units.push(t);
        }
        let downsample = block
            .downsample
            .as_ref()
            .map(|u| self.unit_forward(u, x, mode, false, running))
            .transpose()?;
        let mut out = units[last].out.clone();
        let shortcut = downsample.as_ref().map_or(x, |t| &t.out);
        if shortcut.shape() != out.shape() {
            return Err(Error::shape(fmt_shape(out.shape()), fmt_shape(shortcut.shape())));
        }
        out.add_assign(shortcut);
        relu_inplace(&mut out);
        Ok(BlockTape {
            units,
            downsample,
            out,
        })
    }

    /// Runs the backbone on a batch `(N, C, D, H, W)`.
    pub fn forward_batch(&self, x: &Tensor, mode: Mode) -> Result<Forward> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(Error::shape(
                format!("(N, {}, D, H, W) input", self.config.in_channels),
                fmt_shape(s),
            ));
        }
        // validates every extent up front so errors name the whole input
        self.plan.infer_shapes([s[1], s[2], s[3], s[4]])?;
        let mut running = Vec::new();
        let mut stem = Vec::with_capacity(self.stem.len());
        for u in &self.stem {
            let input = stem.last().map_or(x, |t: &UnitTape| &t.out);
            let t = self.unit_forward(u, input, mode, true, &mut running)?;
            stem.push(t);
        }
        let pool_in = &stem.last().expect("stem has a unit").out;
        let pool_input_shape = pool_in.shape().to_vec();
        let (mut h, pool_argmax) = max_pool3d(pool_in, &self.pool)?;
        let mut blocks = Vec::with_capacity(4);
        let mut stages = Vec::with_capacity(4);
        for stage in &self.stages {
            let mut tapes = Vec::with_capacity(stage.len());
            for b in stage {
                let t = self.block_forward(b, &h, mode, &mut running)?;
                h = t.out.clone();
                tapes.push(t);
            }
            stages.push(h.clone());
            blocks.push(tapes);
        }
        Ok(Forward {
            stages,
            tape: Tape {
                stem,
                pool_input_shape,
                pool_argmax,
                blocks,
                running,
            },
        })
    }

    /// Inference-mode stage features of one volume.
    pub fn forward_features(&self, x: &Volume) -> Result<Vec<Volume>> {
        let [c, d, h, w] = x.dims();
        let batch = x.tensor().clone().reshape(&[1, c, d, h, w])?;
        let fwd = self.forward_batch(&batch, Mode::Eval)?;
        fwd.stages
            .into_iter()
            .map(|t| {
                let s = t.shape().to_vec();
                Volume::new(t.reshape(&s[1..])?)
            })
            .collect()
    }

    /// Folds the batch statistics of a training forward pass into the running
    /// statistics.
    pub fn apply_running_updates(&mut self, tape: &Tape) {
        for u in &tape.running {
            for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let t = &mut self.params.param_mut(id).tensor;
                for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    // -- heads --------------------------------------------------------------

    fn classify_ids(&self) -> Result<(usize, usize, usize, usize)> {
        match self.head {
            Some((
                _,
                Head::Classify {
                    weight,
                    bias,
                    num_classes,
                    channels,
                },
            )) => Ok((weight, bias, num_classes, channels)),
            _ => Err(Error::Config("model has no classification head".into())),
        }
    }

    /// Class logits `(N, K)` from final-stage features.
    pub fn head_logits(&self, features: &Tensor) -> Result<Tensor> {
        let (w, b, k, c) = self.classify_ids()?;
        let n = features.shape()[0];
        if features.shape()[1] != c {
            return Err(Error::shape(format!("{c} feature channels"), fmt_shape(features.shape())));
        }
        let mut logits = Vec::with_capacity(n * k);
        for s in 0..n {
            logits.extend(classify_head_slice(
                features.outer(s),
                c,
                self.params.tensor(w).data(),
                self.params.tensor(b).data(),
            ));
        }
        Tensor::from_vec(&[n, k], logits)
    }

    pub fn head_logits_backward(&self, features: &Tensor, dlogits: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let (w, b, k, c) = self.classify_ids()?;
        let n = features.shape()[0];
        let mut dfeat = Tensor::zeros(features.shape());
        let mut dw = vec![0.0f32; k * c];
        let mut db = vec![0.0f32; k];
        for s in 0..n {
            let g = classify_head_backward_slice(features.outer(s), c, self.params.tensor(w).data(), dlogits.outer(s));
            dfeat.outer_mut(s).copy_from_slice(&g.dfeature);
            dw.iter_mut().zip(&g.dweight).for_each(|(a, &v)| *a += v);
            db.iter_mut().zip(&g.dbias).for_each(|(a, &v)| *a += v);
        }
        grads.accumulate_slice(w, &[k, c], dw);
        grads.accumulate_slice(b, &[k], db);
        Ok(dfeat)
    }

    fn segment_ids(&self) -> Result<(usize, usize)> {
        match self.head {
            Some((_, Head::Segment { weight, bias })) => Ok((weight, bias)),
            _ => Err(Error::Config("model has no segmentation head".into())),
        }
    }

    /// Two-class voxel logits `(N, 2, D, H, W)` on the input grid `out`.
    pub fn segment_logits(&self, stage1: &Tensor, out: [usize; 3]) -> Result<Tensor> {
        let (w, b) = self.segment_ids()?;
        let low = conv3d_forward(
            stage1,
            self.params.tensor(w),
            Some(self.params.tensor(b).data()),
            &ConvGeometry::same([1, 1, 1]),
        )?;
        Ok(upsample_nearest(&low, out))
    }

    pub fn segment_logits_backward(&self, stage1: &Tensor, dlogits: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let (w, b) = self.segment_ids()?;
        let s = stage1.shape();
        let low_shape = [s[0], 2, s[2], s[3], s[4]];
        let dlow = upsample_nearest_backward(&low_shape, dlogits);
        let g = conv3d_backward(stage1, self.params.tensor(w), true, &ConvGeometry::same([1, 1, 1]), &dlow, true)?;
        grads.accumulate(w, g.dweight);
        grads.accumulate_slice(b, &[2], g.dbias.expect("bias requested"));
        Ok(g.dx.expect("input gradient requested"))
    }

    // -- backward -----------------------------------------------------------

    fn unit_backward(
        &self,
        unit: &Unit,
        tape: &UnitTape,
        mut dy: Tensor,
        relu: bool,
        need_dx: bool,
        grads: &mut Grads,
    ) -> Result<Option<Tensor>> {
        let frozen = self.params.is_frozen(unit.weight);
        if frozen && !need_dx {
            return Ok(None);
        }
        if relu {
            relu_backward(&tape.out, &mut dy);
        }
        let gamma = self.params.tensor(unit.norm.gamma).data();
        let ng = norm_backward(&tape.norm, gamma, &dy);
        let cg = conv3d_backward(&tape.input, self.params.tensor(unit.weight), false, &unit.geom, &ng.dx, need_dx)?;
        if !frozen {
            let c = gamma.len();
            grads.accumulate_slice(unit.norm.gamma, &[c], ng.dgamma);
            grads.accumulate_slice(unit.norm.beta, &[c], ng.dbeta);
            grads.accumulate(unit.weight, cg.dweight);
        }
        Ok(cg.dx)
    }

    fn block_backward(
        &self,
        block: &Block,
        tape: &BlockTape,
        dout: Tensor,
        need_dx: bool,
        grads: &mut Grads,
    ) -> Result<Option<Tensor>> {
        let mut d = dout;
        relu_backward(&tape.out, &mut d);
        let last = block.units.len() - 1;
        let mut g = Some(d.clone());
        for j in (0..block.units.len()).rev() {
            let dy = g.take().expect("gradient flows through main path");
            g = self.unit_backward(&block.units[j], &tape.units[j], dy, j < last, j > 0 || need_dx, grads)?;
        }
        let shortcut = match (&block.downsample, &tape.downsample) {
            (Some(u), Some(t)) => self.unit_backward(u, t, d, false, need_dx, grads)?,
            _ => need_dx.then_some(d),
        };
        Ok(match (g, shortcut) {
            (Some(mut a), Some(b)) if need_dx => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        })
    }

    fn unit_trainable(&self, u: &Unit) -> bool {
        !self.params.is_frozen(u.weight)
    }

    /// Backpropagates gradients of the stage outputs (any may be `None`) into
    /// `grads`. Stops early once no trainable parameter remains upstream.
    pub fn backward(&self, tape: &Tape, stage_grads: Vec<Option<Tensor>>, grads: &mut Grads) -> Result<()> {
        if stage_grads.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "expected 4 stage gradients, got {}",
                stage_grads.len()
            )));
        }
        // trainable_upto[i]: some trainable unit lies strictly before flat block i
        let flat: Vec<&Block> = self.stages.iter().flatten().collect();
        let mut trainable_upto = Vec::with_capacity(flat.len());
        let mut seen = self.stem.iter().any(|u| self.unit_trainable(u));
        for b in &flat {
            trainable_upto.push(seen);
            seen |= b.units.iter().chain(b.downsample.iter()).any(|u| self.unit_trainable(u));
        }

        let mut g: Option<Tensor> = None;
        let mut flat_index = flat.len();
        for (s, sg) in stage_grads.into_iter().enumerate().rev() {
            if let Some(sg) = sg {
                match &mut g {
                    Some(acc) => acc.add_assign(&sg),
                    None => g = Some(sg),
                }
            }
            for (b, bt) in self.stages[s].iter().zip(&tape.blocks[s]).rev() {
                flat_index -= 1;
                let need_dx = trainable_upto[flat_index];
                g = match g.take() {
                    Some(dy) => self.block_backward(b, bt, dy, need_dx, grads)?,
                    None => None,
                };
                if !need_dx {
                    return Ok(());
                }
            }
        }
        let Some(dpool) = g else { return Ok(()) };
        let mut g = Some(max_pool3d_backward(&tape.pool_input_shape, &tape.pool_argmax, &dpool));
        for j in (0..self.stem.len()).rev() {
            let dy = g.take().expect("stem gradient");
            let need_dx = j > 0 && self.stem[..j].iter().any(|u| self.unit_trainable(u));
            g = self.unit_backward(&self.stem[j], &tape.stem[j], dy, true, need_dx, grads)?;
            if g.is_none() {
                break;
            }
        }
        Ok(())
    }

    // -- checkpoints --------------------------------------------------------

    pub fn fingerprint(&self) -> Fingerprint {
        config_fingerprint(&self.config, self.head_kind())
    }

    /// All parameters and buffers in manifest order. Planar models store
    /// convolution weights without the unit depth axis.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let planar = self.config.is_planar();
        let mut ckpt = Checkpoint::new(self.fingerprint());
        for (name, p) in self.params.iter() {
            let t = if planar && p.tensor.ndim() == 5 && name.starts_with("backbone.") {
                let s = p.tensor.shape();
                p.tensor.clone().reshape(&[s[0], s[1], s[3], s[4]]).expect("unit depth axis")
            } else {
                p.tensor.clone()
            };
            ckpt.insert(name, t).expect("parameter names are unique");
        }
        ckpt
    }

    /// Copies tensors by name. With `strict`, every model tensor must be present.
    /// A 4-axis planar weight loads into a depth-1 5-axis slot.
    pub fn load_tensors(&mut self, ckpt: &Checkpoint, strict: bool) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for (name, p) in self.params.iter_mut() {
            let Some(src) = ckpt.get(name) else {
                missing.push(name.to_string());
                continue;
            };
            let target = p.tensor.shape();
            let fits = src.shape() == target
                || (target.len() == 5
                    && target[2] == 1
                    && src.shape() == [target[0], target[1], target[3], target[4]]);
            if !fits {
                mismatched.push(format!(
                    "  {name}: checkpoint {} vs model {}",
                    fmt_shape(src.shape()),
                    fmt_shape(target)
                ));
                continue;
            }
            p.tensor = src.clone().reshape(target)?;
            loaded.push(name.to_string());
        }
        if !mismatched.is_empty() {
            return Err(Error::ShapeDiff(mismatched.join("\n")));
        }
        if strict && !missing.is_empty() {
            return Err(Error::IncompatibleArchitecture(format!(
                "checkpoint lacks {} model tensors, first `{}`",
                missing.len(),
                missing[0]
            )));
        }
        Ok(loaded)
    }

    /// Rebuilds a model (and its head) from a checkpoint written by
    /// [`BackboneModel::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let fp = ckpt.fingerprint();
        let config = embedded_config(fp)?;
        if config.family != fp.family || config.stem != fp.stem {
            return Err(Error::IncompatibleArchitecture(
                "fingerprint disagrees with embedded config".into(),
            ));
        }
        let mut model = Self::new(&config, 0)?;
        if let Some(head) = fp.meta.get(META_HEAD) {
            let kind: HeadKind = serde_json::from_str(head)?;
            model.attach_head(kind, 0)?;
        }
        model.load_tensors(ckpt, true)?;
        Ok(model)
    }
}
