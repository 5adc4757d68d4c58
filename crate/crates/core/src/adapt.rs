//! Task adapters on top of backbone features.
//!
//! * classification head: global average pooling over depth, height and width,
//!   then a fully connected layer;
//! * group transform module (GTM): fuses the depth slices of each channel of a
//!   `(C, D, H, W)` feature map into one 2D map with a grouped 1x1 convolution
//!   (`C` groups of `D` inputs each);
//! * pyramid adapter: one GTM per pyramid level, producing 2D maps for a
//!   standard detection neck.
//!
//! The head and GTM kernels are generic over the scalar type so that gradient
//! checks can run in double precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::config::BackboneConfig;
use crate::backbone::plan::ArchPlan;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Element, Tensor};
use crate::vardim::Volume;

pub const FC_WEIGHT: &str = "adapt.fc.weight";
pub const FC_BIAS: &str = "adapt.fc.bias";
pub const SEG_WEIGHT: &str = "adapt.seg.weight";
pub const SEG_BIAS: &str = "adapt.seg.bias";

/// Anchor scales used by the lesion-detection recipe on the five pyramid levels.
/// Anchor generation itself is outside this crate.
pub const DETECTION_ANCHOR_SCALES: [usize; 5] = [16, 32, 64, 128, 256];

pub fn gtm_weight_name(level: usize) -> String {
    format!("adapt.gtm.level{level}.weight")
}

pub fn gtm_bias_name(level: usize) -> String {
    format!("adapt.gtm.level{level}.bias")
}

// ---------------------------------------------------------------------------
// classification head

/// Logits for one `(C, D, H, W)` feature given as a flat slice.
pub fn classify_head_slice<T: Element>(feature: &[T], channels: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let spatial = feature.len() / channels;
    let inv = T::one() / T::from_f64(spatial as f64);
    let pooled: Vec<T> = feature
        .chunks(spatial)
        .map(|c| c.iter().copied().sum::<T>() * inv)
        .collect();
    bias.iter()
        .enumerate()
        .map(|(k, &b)| {
            weight[k * channels..(k + 1) * channels]
                .iter()
                .zip(&pooled)
                .map(|(&w, &p)| w * p)
                .sum::<T>()
                + b
        })
        .collect()
}

pub struct HeadGrads<T> {
    pub dfeature: Vec<T>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn classify_head_backward_slice<T: Element>(
    feature: &[T],
    channels: usize,
    weight: &[T],
    dlogits: &[T],
) -> HeadGrads<T> {
    let spatial = feature.len() / channels;
    let inv = T::one() / T::from_f64(spatial as f64);
    let pooled: Vec<T> = feature
        .chunks(spatial)
        .map(|c| c.iter().copied().sum::<T>() * inv)
        .collect();
    let mut dweight = vec![T::zero(); weight.len()];
    let mut dpooled = vec![T::zero(); channels];
    for (k, &g) in dlogits.iter().enumerate() {
        for c in 0..channels {
            dweight[k * channels + c] = g * pooled[c];
            dpooled[c] = dpooled[c] + g * weight[k * channels + c];
        }
    }
    let mut dfeature = vec![T::zero(); feature.len()];
    for (c, chunk) in dfeature.chunks_mut(spatial).enumerate() {
        chunk.fill(dpooled[c] * inv);
    }
    HeadGrads {
        dfeature,
        dweight,
        dbias: dlogits.to_vec(),
    }
}

/// Fully connected classifier on globally pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyHead<T: Element = f32> {
    /// `(num_classes, channels)`
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Element> ClassifyHead<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || s[0] != bias.len() {
            return Err(Error::shape(
                "(num_classes, channels) weight with matching bias",
                format!("{} and {} biases", fmt_shape(s), bias.len()),
            ));
        }
        if s[0] < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {}", s[0])));
        }
        Ok(Self { weight, bias })
    }

    /// Uniform `±1/sqrt(channels)` initialization.
    pub fn init(channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        let (w, b) = init_linear(channels, num_classes, seed);
        Self::new(
            Tensor::from_vec(&[num_classes, channels], w.into_iter().map(T::from_f64).collect())?,
            b.into_iter().map(T::from_f64).collect(),
        )
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, feature: &Tensor<T>) -> Result<Vec<T>> {
        self.check(feature)?;
        Ok(classify_head_slice(feature.data(), self.channels(), self.weight.data(), &self.bias))
    }

    pub fn backward(&self, feature: &Tensor<T>, dlogits: &[T]) -> Result<HeadGrads<T>> {
        self.check(feature)?;
        Ok(classify_head_backward_slice(
            feature.data(),
            self.channels(),
            self.weight.data(),
            dlogits,
        ))
    }

    fn check(&self, feature: &Tensor<T>) -> Result<()> {
        if feature.ndim() != 4 || feature.shape()[0] != self.channels() {
            return Err(Error::shape(
                format!("({}, D, H, W) feature", self.channels()),
                fmt_shape(feature.shape()),
            ));
        }
        Ok(())
    }
}

/// Logits of `num_classes` classes from a feature volume with a freshly
/// initialized head.
pub fn classify_head(feature: &Volume, num_classes: usize, seed: u64) -> Result<Vec<f32>> {
    ClassifyHead::<f32>::init(feature.channels(), num_classes, seed)?.forward(feature.tensor())
}

pub(crate) fn init_linear(fan_in: usize, fan_out: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    (w, b)
}

// ---------------------------------------------------------------------------
// group transform module

/// Grouped 1x1 fusion weights: `weight` is `(C, D)`, one row of depth weights per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct GtmParams<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Element> GtmParams<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || s[0] != bias.len() || s[1] == 0 {
            return Err(Error::shape(
                "(C, D) weight with C biases",
                format!("{} and {} biases", fmt_shape(s), bias.len()),
            ));
        }
        Ok(Self { weight, bias })
    }

    /// Picks the centre slice: weight 1 at depth `D / 2`, zero elsewhere, zero bias.
    pub fn selector(channels: usize, depth: usize) -> Self {
        let mut w = Tensor::zeros(&[channels, depth]);
        for c in 0..channels {
            w.data_mut()[c * depth + depth / 2] = T::one();
        }
        Self {
            weight: w,
            bias: vec![T::zero(); channels],
        }
    }

    /// Centre-slice selector plus Gaussian noise of standard deviation `scale`.
    pub fn init(channels: usize, depth: usize, seed: u64, scale: f64) -> Self {
        let mut p = Self::selector(channels, depth);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("finite scale");
        for v in p.weight.data_mut() {
            *v = *v + T::from_f64(normal.sample(&mut rng));
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn depth(&self) -> usize {
        self.weight.shape()[1]
    }

    fn check(&self, feature: &Tensor<T>) -> Result<()> {
        let s = feature.shape();
        if s.len() != 4 || s[0] != self.channels() || s[1] != self.depth() {
            return Err(Error::shape(
                format!("({}, {}, H, W) feature", self.channels(), self.depth()),
                fmt_shape(s),
            ));
        }
        Ok(())
    }
}

/// `out[c] = sum_j w[c, j] * feature[c, j] + b[c]`, giving a `(C, H, W)` map.
pub fn gtm_fuse<T: Element>(feature: &Tensor<T>, params: &GtmParams<T>) -> Result<Tensor<T>> {
    params.check(feature)?;
    let s = feature.shape();
    let (c, d, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(&[c, s[2], s[3]]);
    let w = params.weight.data();
    for ch in 0..c {
        let dst = out.outer_mut(ch);
        dst.fill(params.bias[ch]);
        for j in 0..d {
            let wv = w[ch * d + j];
            let src = &feature.data()[(ch * d + j) * hw..][..hw];
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = *o + wv * x;
            }
        }
    }
    Ok(out)
}

pub struct GtmGrads<T> {
    pub dfeature: Tensor<T>,
    pub dweight: Tensor<T>,
    pub dbias: Vec<T>,
}

pub fn gtm_backward<T: Element>(feature: &Tensor<T>, params: &GtmParams<T>, dout: &Tensor<T>) -> Result<GtmGrads<T>> {
    params.check(feature)?;
    let s = feature.shape();
    let (c, d, hw) = (s[0], s[1], s[2] * s[3]);
    if dout.shape() != [c, s[2], s[3]] {
        return Err(Error::shape(fmt_shape(&[c, s[2], s[3]]), fmt_shape(dout.shape())));
    }
    let w = params.weight.data();
    let mut dfeature = Tensor::zeros(s);
    let mut dweight = Tensor::zeros(params.weight.shape());
    let mut dbias = vec![T::zero(); c];
    for ch in 0..c {
        let g = dout.outer(ch);
        dbias[ch] = g.iter().copied().sum();
        for j in 0..d {
            let x = &feature.data()[(ch * d + j) * hw..][..hw];
            dweight.data_mut()[ch * d + j] = x.iter().zip(g).map(|(&a, &b)| a * b).sum();
            let wv = w[ch * d + j];
            for (dst, &gv) in dfeature.data_mut()[(ch * d + j) * hw..][..hw].iter_mut().zip(g) {
                *dst = gv * wv;
            }
        }
    }
    Ok(GtmGrads {
        dfeature,
        dweight,
        dbias,
    })
}

// ---------------------------------------------------------------------------
// pyramid adapter

/// One GTM per pyramid level, ordered fine to coarse.
#[derive(Clone, Debug, PartialEq)]
pub struct GtmBank {
    pub levels: Vec<GtmParams<f32>>,
}

impl GtmBank {
    /// Selector-plus-noise GTMs for levels of the given `(channels, depth)`.
    pub fn init(levels: &[(usize, usize)], seed: u64) -> Self {
        Self {
            levels: levels
                .iter()
                .enumerate()
                .map(|(i, &(c, d))| GtmParams::init(c, d, seed.wrapping_add(i as u64), 1e-3))
                .collect(),
        }
    }

    pub fn selectors(levels: &[(usize, usize)]) -> Self {
        Self {
            levels: levels.iter().map(|&(c, d)| GtmParams::selector(c, d)).collect(),
        }
    }

    /// Stores weights as grouped-convolution tensors `(C, D, 1, 1)`.
    pub fn write_to(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for (i, p) in self.levels.iter().enumerate() {
            let w = p.weight.clone().reshape(&[p.channels(), p.depth(), 1, 1])?;
            ckpt.insert(gtm_weight_name(i), w)?;
            ckpt.insert(gtm_bias_name(i), Tensor::from_vec(&[p.channels()], p.bias.clone())?)?;
        }
        Ok(())
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let mut levels = Vec::new();
        while let Some(w) = ckpt.get(&gtm_weight_name(levels.len())) {
            let i = levels.len();
            let b = ckpt
                .get(&gtm_bias_name(i))
                .ok_or_else(|| Error::InvalidInput(format!("missing {}", gtm_bias_name(i))))?;
            let s = w.shape();
            let weight = w.clone().reshape(&[s[0], s[1]])?;
            levels.push(GtmParams::new(weight, b.data().to_vec())?);
        }
        Ok(Self { levels })
    }
}

/// 2D pyramid maps after per-level depth fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures {
    /// `(C, H, W)` per level, fine to coarse.
    pub levels: Vec<Tensor>,
    /// Depth of each level before fusion.
    pub per_level_depth: Vec<usize>,
}

/// Appends a coarser level by stride-2 subsampling of the last level on every axis.
pub fn with_extra_level(mut levels: Vec<Volume>) -> Result<Vec<Volume>> {
    let last = levels
        .last()
        .ok_or_else(|| Error::InvalidInput("no pyramid levels".into()))?;
    let [c, d, h, w] = last.dims();
    let out = [d.div_ceil(2), h.div_ceil(2), w.div_ceil(2)];
    let mut data = Vec::with_capacity(c * out.iter().product::<usize>());
    for ch in 0..c {
        for z in 0..out[0] {
            for y in 0..out[1] {
                for x in 0..out[2] {
                    data.push(last.at(ch, 2 * z, 2 * y, 2 * x));
                }
            }
        }
    }
    levels.push(Volume::new(Tensor::from_vec(&[c, out[0], out[1], out[2]], data)?)?);
    Ok(levels)
}

/// Shapes of the detection pyramid (four stages plus the subsampled extra level).
pub fn pyramid_level_shapes(config: &BackboneConfig, input: [usize; 4]) -> Result<Vec<[usize; 4]>> {
    let mut shapes = ArchPlan::new(config)?.infer_shapes(input)?;
    let [c, d, h, w] = *shapes.last().expect("four stages");
    shapes.push([c, d.div_ceil(2), h.div_ceil(2), w.div_ceil(2)]);
    Ok(shapes)
}

pub fn pyramid_adapt(stage_features: &[Volume], bank: &GtmBank) -> Result<PyramidFeatures> {
    if stage_features.len() != bank.levels.len() {
        return Err(Error::Config(format!(
            "{} feature levels but {} GTMs",
            stage_features.len(),
            bank.levels.len()
        )));
    }
    let mut levels = Vec::with_capacity(stage_features.len());
    let mut per_level_depth = Vec::with_capacity(stage_features.len());
    for (f, p) in stage_features.iter().zip(&bank.levels) {
        levels.push(gtm_fuse(f.tensor(), p)?);
        per_level_depth.push(f.depth());
    }
    Ok(PyramidFeatures {
        levels,
        per_level_depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::config::Family;
    use proptest::prelude::*;
    use rand::Rng;

    fn random<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect()).unwrap()
    }

    #[test]
    fn constant_feature_with_averaging_rows() {
        let c = 4;
        let weight = Tensor::full(&[3, c], 1.0 / c as f32);
        let head = ClassifyHead::new(weight, vec![0.0; 3]).unwrap();
        let feature = Tensor::full(&[c, 2, 3, 3], 2.5);
        let logits = head.forward(&feature).unwrap();
        for l in logits {
            assert!((l - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn imagenet_sized_head() {
        let feature = Volume::new(random(&[512, 3, 7, 7], 1)).unwrap();
        assert_eq!(classify_head(&feature, 1000, 0).unwrap().len(), 1000);
        assert!(matches!(classify_head(&feature, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pooling_ignores_position_order() {
        let f: Tensor<f64> = random(&[3, 2, 2, 2], 5);
        let head = ClassifyHead::<f64>::init(3, 4, 9).unwrap();
        let mut permuted = f.clone();
        for ch in 0..3 {
            permuted.outer_mut(ch).reverse();
        }
        let a = head.forward(&f).unwrap();
        let b = head.forward(&permuted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gtm_selector_extracts_centre() {
        let f: Tensor<f32> = random(&[2, 3, 4, 4], 3);
        let mut p = GtmParams::selector(2, 3);
        p.weight = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let out = gtm_fuse(&f, &p).unwrap();
        for ch in 0..2 {
            assert_eq!(out.outer(ch), &f.data()[(ch * 3 + 1) * 16..][..16]);
        }
    }

    #[test]
    fn gtm_shapes_and_degenerate_depth() {
        let f: Tensor<f32> = random(&[256, 3, 32, 32], 4);
        let out = gtm_fuse(&f, &GtmParams::init(256, 3, 0, 1e-3)).unwrap();
        assert_eq!(out.shape(), &[256, 32, 32]);

        let f1: Tensor<f32> = random(&[5, 1, 3, 3], 6);
        let out = gtm_fuse(&f1, &GtmParams::selector(5, 1)).unwrap();
        assert_eq!(out.data(), f1.data());

        let bad = gtm_fuse(&f1, &GtmParams::selector(5, 3));
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn pyramid_depth_schedule() {
        let depths = [9, 5, 3, 1, 1];
        let feats: Vec<Volume> = depths
            .iter()
            .enumerate()
            .map(|(i, &d)| Volume::new(random(&[8, d, 16 >> i, 16 >> i], i as u64)).unwrap())
            .collect();
        let dims: Vec<(usize, usize)> = feats.iter().map(|f| (f.channels(), f.depth())).collect();
        let bank = GtmBank::init(&dims, 7);
        let pyr = pyramid_adapt(&feats, &bank).unwrap();
        assert_eq!(pyr.per_level_depth, depths);
        for (lvl, f) in pyr.levels.iter().zip(&feats) {
            let [c, _, h, w] = f.dims();
            assert_eq!(lvl.shape(), &[c, h, w]);
        }
        let short = GtmBank::init(&dims[..4], 7);
        assert!(matches!(pyramid_adapt(&feats, &short), Err(Error::Config(_))));
    }

    #[test]
    fn single_level_selector_is_centre_slice() {
        let f = Volume::new(random(&[3, 5, 4, 4], 8)).unwrap();
        let pyr = pyramid_adapt(std::slice::from_ref(&f), &GtmBank::selectors(&[(3, 5)])).unwrap();
        for ch in 0..3 {
            for i in 0..16 {
                assert_eq!(pyr.levels[0].outer(ch)[i], f.at(ch, 2, i / 4, i % 4));
            }
        }
    }

    #[test]
    fn detection_pyramid_depths() {
        let cfg = BackboneConfig::detection(Family::Resnet18);
        let depths: Vec<usize> = pyramid_level_shapes(&cfg, [1, 9, 512, 512])
            .unwrap()
            .iter()
            .map(|s| s[1])
            .collect();
        assert_eq!(depths, vec![9, 5, 3, 1, 1]);
    }

    #[test]
    fn bank_checkpoint_round_trip() {
        use crate::backbone::config::Stem;
        use crate::checkpoint::{Fingerprint, Layout};
        let bank = GtmBank::init(&[(4, 3), (8, 1)], 1);
        let mut ckpt = Checkpoint::new(Fingerprint::new(Family::Resnet18, Stem::K7, Layout::Cdhw, true));
        bank.write_to(&mut ckpt).unwrap();
        assert_eq!(ckpt.get("adapt.gtm.level1.weight").unwrap().shape(), &[8, 1, 1, 1]);
        assert_eq!(GtmBank::read_from(&ckpt).unwrap(), bank);
    }

    proptest! {
        #[test]
        fn gtm_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, d in 1usize..5) {
            let x: Tensor<f64> = random(&[3, d, 2, 3], seed);
            let y: Tensor<f64> = random(&[3, d, 2, 3], seed ^ 1);
            let mut p: GtmParams<f64> = GtmParams::init(3, d, seed, 0.5);
            p.bias = vec![0.0; 3];
            let mut comb = x.clone();
            for (c, (&xv, &yv)) in comb.data_mut().iter_mut().zip(x.data().iter().zip(y.data())) {
                *c = a * xv + b * yv;
            }
            let lhs = gtm_fuse(&comb, &p).unwrap();
            let fx = gtm_fuse(&x, &p).unwrap();
            let fy = gtm_fuse(&y, &p).unwrap();
            for i in 0..lhs.numel() {
                let rhs = a * fx.data()[i] + b * fy.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-9);
            }
        }
    }
}
