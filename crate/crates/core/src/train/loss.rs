//! Losses with analytic gradients. Generic over the scalar type so gradient
//! checks can run in double precision.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::vardim::Volume;

/// Smoothing constant of the training dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

fn check_ce<T: Element>(logits: &[T], target: usize, eps: T) -> Result<()> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::Config(format!("cross entropy needs at least 2 classes, got {k}")));
    }
    if target >= k {
        return Err(Error::Index(format!("target {target} outside [0, {k})")));
    }
    let e = eps.to_f64();
    if !(0.0..1.0).contains(&e) {
        return Err(Error::InvalidRange(format!("label smoothing {e} outside [0, 1)")));
    }
    Ok(())
}

fn log_softmax<T: Element>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - m).exp()).sum::<T>().ln() + m;
    logits.iter().map(|&z| z - lse).collect()
}

/// Cross entropy against `(1 - eps) * onehot(target) + eps / K`.
pub fn ce_label_smooth<T: Element>(logits: &[T], target: usize, eps: T) -> Result<T> {
    Ok(ce_label_smooth_grad(logits, target, eps)?.0)
}

/// Loss and its gradient with respect to the logits (`softmax - q`).
pub fn ce_label_smooth_grad<T: Element>(logits: &[T], target: usize, eps: T) -> Result<(T, Vec<T>)> {
    check_ce(logits, target, eps)?;
    let k = T::from_f64(logits.len() as f64);
    let off = eps / k;
    let on = T::one() - eps + off;
    let ls = log_softmax(logits);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(ls.len());
    for (i, &l) in ls.iter().enumerate() {
        let q = if i == target { on } else { off };
        loss = loss - q * l;
        grad.push(l.exp() - q);
    }
    Ok((loss, grad))
}

fn check_pair<T>(pred: &[T], mask: &[T]) -> Result<()> {
    if pred.len() != mask.len() {
        return Err(Error::shape(
            format!("{} prediction values", mask.len()),
            format!("{}", pred.len()),
        ));
    }
    Ok(())
}

/// `1 - (2 sum(p m) + s) / (sum(p) + sum(m) + s)`. With `s = 0` and both
/// inputs empty the overlap is taken as perfect.
pub fn dice_loss_with<T: Element>(pred: &[T], mask: &[T], smooth: T) -> Result<T> {
    Ok(dice_loss_grad(pred, mask, smooth)?.0)
}

/// Dice loss and its gradient with respect to `pred`.
pub fn dice_loss_grad<T: Element>(pred: &[T], mask: &[T], smooth: T) -> Result<(T, Vec<T>)> {
    check_pair(pred, mask)?;
    let two = T::from_f64(2.0);
    let inter: T = pred.iter().zip(mask).map(|(&p, &m)| p * m).sum();
    let total: T = pred.iter().copied().sum::<T>() + mask.iter().copied().sum::<T>();
    let num = two * inter + smooth;
    let den = total + smooth;
    if den == T::zero() {
        return Ok((T::zero(), vec![T::zero(); pred.len()]));
    }
    let loss = T::one() - num / den;
    // d/dp_i of -(num/den) = -(2 m_i den - num) / den^2
    let den2 = den * den;
    let grad = mask.iter().map(|&m| -(two * m * den - num) / den2).collect();
    Ok((loss, grad))
}

/// Training dice loss on probability and mask volumes (smoothing [`DICE_SMOOTH`]).
pub fn dice_loss(pred: &Volume, mask: &Volume) -> Result<f32> {
    if pred.dims() != mask.dims() {
        return Err(Error::shape(
            crate::tensor::fmt_shape(&mask.dims()),
            crate::tensor::fmt_shape(&pred.dims()),
        ));
    }
    dice_loss_with(pred.tensor().data(), mask.tensor().data(), DICE_SMOOTH as f32)
}

/// Weights of the two segmentation loss terms: `dice * dice_loss + ce * cross_entropy`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
}

impl LossWeights {
    /// Nodule segmentation recipe.
    pub const LIDC: Self = Self { dice: 0.3, ce: 1.0 };
    /// Liver segmentation recipe.
    pub const LITS: Self = Self { dice: 0.5, ce: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.dice >= 0.0 && self.ce >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

impl std::str::FromStr for LossWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("loss weights must be `dice,ce`, got `{s}`"));
        let (d, c) = s.split_once(',').ok_or_else(bad)?;
        let w = Self {
            dice: d.trim().parse().map_err(|_| bad())?,
            ce: c.trim().parse().map_err(|_| bad())?,
        };
        w.validate()?;
        Ok(w)
    }
}

/// Two-class voxel loss on logits `(N, 2, D, H, W)` and masks `(N, 1, D, H, W)`.
///
/// Cross entropy is averaged over voxels; dice is computed per sample on the
/// foreground probability and averaged over the batch. Returns the weighted
/// total and the gradient with respect to the logits.
pub fn segmentation_loss(logits: &Tensor, masks: &Tensor, weights: LossWeights) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 5 || s[1] != 2 || masks.shape() != [s[0], 1, s[2], s[3], s[4]] {
        return Err(Error::shape(
            "(N, 2, D, H, W) logits with (N, 1, D, H, W) masks".to_string(),
            format!("{:?} and {:?}", s, masks.shape()),
        ));
    }
    let (n, v) = (s[0], s[2] * s[3] * s[4]);
    let mut grad = Tensor::zeros(s);
    let mut ce_total = 0.0f64;
    let mut dice_total = 0.0f64;
    let ce_scale = weights.ce / (n * v) as f64;
    for b in 0..n {
        let l = logits.outer(b);
        let m = masks.outer(b);
        let mut probs = Vec::with_capacity(v);
        let g = grad.outer_mut(b);
        for i in 0..v {
            let (z0, z1) = (l[i] as f64, l[v + i] as f64);
            let mx = z0.max(z1);
            let (e0, e1) = ((z0 - mx).exp(), (z1 - mx).exp());
            let p1 = e1 / (e0 + e1);
            let y = m[i] as f64;
            let lp1 = (z1 - mx) - (e0 + e1).ln();
            let lp0 = (z0 - mx) - (e0 + e1).ln();
            ce_total -= y * lp1 + (1.0 - y) * lp0;
            g[i] = (ce_scale * ((1.0 - p1) - (1.0 - y))) as f32;
            g[v + i] = (ce_scale * (p1 - y)) as f32;
            probs.push(p1);
        }
        let mask64: Vec<f64> = m.iter().map(|&x| x as f64).collect();
        let (dl, dg) = dice_loss_grad(&probs, &mask64, DICE_SMOOTH)?;
        dice_total += dl;
        let dscale = weights.dice / n as f64;
        for i in 0..v {
            // p1 = sigmoid(z1 - z0)
            let dp = dscale * dg[i] * probs[i] * (1.0 - probs[i]);
            g[i] -= dp as f32;
            g[v + i] += dp as f32;
        }
    }
    let loss = weights.ce * ce_total / (n * v) as f64 + weights.dice * dice_total / n as f64;
    Ok((loss, grad))
}
