use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneModel, Mode};
use crate::data::{stack_volumes, Dataset};
use crate::error::{Error, Result};

use super::infer::{sliding_window_infer, softmax_channels, VolumePredictor};

/// Binary-only entries are `None` for multi-class sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub top1: f64,
    pub top5: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
}

/// Area under the ROC curve as the normalized Mann-Whitney statistic; tied
/// scores share their average rank, which equals trapezoidal integration.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from per-class scores. Class 1 is the positive class of binary sets;
/// ratios with an empty denominator are reported as 0.
pub fn classification_metrics(scores: &[Vec<f64>], labels: &[usize]) -> Result<ClassificationMetrics> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let k = scores[0].len();
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("label {bad} outside [0, {k})")));
    }
    let mut top1 = 0;
    let mut top5 = 0;
    for (s, &l) in scores.iter().zip(labels) {
        let above = s.iter().filter(|&&v| v > s[l]).count();
        // ties resolved in favour of the lower index, as argmax does
        let tied_before = s[..l].iter().filter(|&&v| v == s[l]).count();
        let rank = above + tied_before;
        top1 += (rank == 0) as usize;
        top5 += (rank < 5) as usize;
    }
    let n = labels.len();
    let mut m = ClassificationMetrics {
        top1: ratio(top1, n),
        top5: ratio(top5, n),
        accuracy: ratio(top1, n),
        auc: None,
        f1: None,
        precision: None,
        recall: None,
        specificity: None,
    };
    if k == 2 {
        let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let pos_score: Vec<f64> = scores.iter().map(|s| s[1]).collect();
        let pred: Vec<bool> = scores.iter().map(|s| s[1] > s[0]).collect();
        let count = |p: bool, y: bool| pred.iter().zip(&positive).filter(|&(&a, &b)| a == p && b == y).count();
        let (tp, fp, tn, fn_) = (count(true, true), count(true, false), count(false, false), count(false, true));
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        m.precision = Some(precision);
        m.recall = Some(recall);
        m.specificity = Some(ratio(tn, tn + fp));
        m.f1 = Some(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        });
        m.auc = Some(auc(&pos_score, &positive)?);
    }
    Ok(m)
}

/// Class probabilities for every sample of a classification set, in order.
pub fn predict_classes(model: &BackboneModel, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let volumes = data
        .samples
        .iter()
        .map(|s| s.input.to_volume())
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(volumes.len());
    for chunk in volumes.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let x = stack_volumes(&refs)?;
        let fwd = model.forward_batch(&x, Mode::Eval)?;
        let logits = model.head_logits(&fwd.stages[3])?;
        let k = logits.shape()[1];
        let probs = softmax_channels(&logits.reshape(&[chunk.len(), k, 1])?);
        for b in 0..chunk.len() {
            out.push(probs.outer(b).iter().map(|&v| v as f64).collect());
        }
    }
    Ok(out)
}

pub fn evaluate_classification(model: &BackboneModel, data: &Dataset) -> Result<ClassificationMetrics> {
    let labels = data
        .samples
        .iter()
        .map(|s| s.class().ok_or_else(|| Error::Data(format!("sample {} has no class label", s.id))))
        .collect::<Result<Vec<_>>>()?;
    let scores = predict_classes(model, data, 16)?;
    classification_metrics(&scores, &labels)
}

/// Dice of two binary masks without smoothing; two empty masks score 1.
pub fn dice_coefficient(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|&(&a, &b)| a && b).count();
    let total = pred.iter().filter(|&&a| a).count() + gt.iter().filter(|&&b| b).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Keeps the largest 6-connected foreground component of a `(D, H, W)` mask.
pub fn largest_component(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let mut label = vec![0u32; mask.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}

/// Dice per case in percent, with population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub per_case: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl SegmentationMetrics {
    /// `dices` are fractions in `[0, 1]`.
    pub fn from_dices(dices: &[f64]) -> Self {
        let per_case: Vec<f64> = dices.iter().map(|d| 100.0 * d).collect();
        let n = per_case.len().max(1) as f64;
        let mean = per_case.iter().sum::<f64>() / n;
        let var = per_case.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            per_case,
            mean,
            sd: var.sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegEvalOptions {
    pub largest_component: bool,
    /// Sliding-window `(patch, stride)`; whole-volume inference when absent.
    pub window: Option<([usize; 3], [usize; 3])>,
}

/// Thresholds the foreground probability at 0.5 and scores each case.
pub fn evaluate_segmentation(
    predictor: &dyn VolumePredictor,
    data: &Dataset,
    options: SegEvalOptions,
) -> Result<SegmentationMetrics> {
    let mut dices = Vec::with_capacity(data.len());
    for s in &data.samples {
        let gt = s
            .mask()
            .ok_or_else(|| Error::Data(format!("sample {} has no mask", s.id)))?;
        let v = s.input.to_volume()?;
        let probs = match options.window {
            Some((patch, stride)) => sliding_window_infer(predictor, &v, patch, stride)?,
            None => predictor.predict(&v)?,
        };
        let [c, d, h, w] = probs.dims();
        let fg = &probs.tensor().data()[(c - 1) * d * h * w..];
        let mut pred: Vec<bool> = fg.iter().map(|&p| p >= 0.5).collect();
        if options.largest_component {
            pred = largest_component(&pred, [d, h, w]);
        }
        let gt: Vec<bool> = gt.tensor().data().iter().map(|&m| m >= 0.5).collect();
        if gt.len() != pred.len() {
            return Err(Error::shape(format!("{} voxels", gt.len()), pred.len().to_string()));
        }
        dices.push(dice_coefficient(&pred, &gt));
    }
    Ok(SegmentationMetrics::from_dices(&dices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_worked_example() {
        let a = auc(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_random_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
        let labels: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        assert!((auc(&scores, &labels).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn perfect_binary_metrics() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.3, 0.7]];
        let m = classification_metrics(&scores, &[0, 1, 1]).unwrap();
        for v in [m.top1, m.top5, m.accuracy, m.auc.unwrap(), m.f1.unwrap(), m.precision.unwrap(), m.recall.unwrap(), m.specificity.unwrap()] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn dice_conventions() {
        assert_eq!(dice_coefficient(&[false, false], &[false, false]), 1.0);
        assert_eq!(dice_coefficient(&[false, false], &[true, false]), 0.0);
        let m = SegmentationMetrics::from_dices(&[0.8, 0.6]);
        assert!((m.mean - 70.0).abs() < 1e-9 && (m.sd - 10.0).abs() < 1e-9);
    }

    #[test]
    fn largest_component_kept() {
        let mut mask = vec![false; 27];
        for i in [0, 1, 2, 3] {
            mask[i] = true;
        }
        mask[26] = true;
        let kept = largest_component(&mask, [3, 3, 3]);
        assert_eq!(kept.iter().filter(|&&k| k).count(), 4);
        assert!(!kept[26]);
    }
}
