use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneModel, Grads, HeadKind, Mode};
use crate::checkpoint::Checkpoint;
use crate::convert::{transplant_svd, ConversionReport};
use crate::data::{augment, stack_volumes, Input, LabeledSample};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vardim::{to_pseudo3d, Volume};

use super::loss::{ce_label_smooth_grad, segmentation_loss};
use super::optim::Sgd;
use super::schedule::lr_at;
use super::{EpochRecord, TrainConfig, TrainLog};

enum Task {
    Classify(usize),
    Segment,
}

fn task_of(model: &BackboneModel) -> Result<Task> {
    match model.head_kind() {
        Some(HeadKind::Classify { num_classes }) => Ok(Task::Classify(num_classes)),
        Some(HeadKind::Segment) => Ok(Task::Segment),
        None => Err(Error::Config("training needs a task head on the model".into())),
    }
}

struct Batch {
    x: Tensor,
    classes: Vec<usize>,
    masks: Option<Tensor>,
}

fn make_batch(samples: &[LabeledSample], pseudo3d: bool) -> Result<Batch> {
    let mut volumes = Vec::with_capacity(samples.len());
    let mut masks = Vec::new();
    let mut classes = Vec::new();
    for s in samples {
        let v = match (&s.input, pseudo3d) {
            (Input::Planar(p), true) => to_pseudo3d(p)?,
            (Input::Volume(_), true) => {
                return Err(Error::Data(format!(
                    "sample {} is a volume; pre-training expects 3-channel planar images",
                    s.id
                )))
            }
            (input, false) => input.to_volume()?,
        };
        volumes.push(v);
        if let Some(c) = s.class() {
            classes.push(c);
        }
        if let Some(m) = s.mask() {
            masks.push(m.clone());
        }
    }
    let refs: Vec<&Volume> = volumes.iter().collect();
    let masks = if masks.is_empty() {
        None
    } else {
        let mrefs: Vec<&Volume> = masks.iter().collect();
        Some(stack_volumes(&mrefs)?)
    };
    Ok(Batch {
        x: stack_volumes(&refs)?,
        classes,
        masks,
    })
}

/// One optimization step; returns (summed loss, correct predictions).
fn train_step(
    model: &mut BackboneModel,
    opt: &mut Sgd,
    batch: &Batch,
    task: &Task,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(f64, usize)> {
    let n = batch.x.shape()[0];
    let fwd = model.forward_batch(&batch.x, Mode::Train)?;
    let mut grads = Grads::new(model.params());
    let (loss, correct, stage_grads) = match task {
        Task::Classify(k) => {
            if batch.classes.len() != n {
                return Err(Error::Data("classification batch has samples without class labels".into()));
            }
            let logits = model.head_logits(&fwd.stages[3])?;
            let mut dlogits = Vec::with_capacity(n * k);
            let mut loss = 0.0;
            let mut correct = 0;
            for (b, &label) in batch.classes.iter().enumerate() {
                let row: Vec<f64> = logits.outer(b).iter().map(|&v| v as f64).collect();
                let (l, g) = ce_label_smooth_grad(&row, label, cfg.label_smoothing)?;
                loss += l;
                dlogits.extend(g.iter().map(|&v| (v / n as f64) as f32));
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |bi, (i, &v)| if v > row[bi] { i } else { bi });
                correct += (best == label) as usize;
            }
            let dlogits = Tensor::from_vec(&[n, *k], dlogits)?;
            let dfeat = model.head_logits_backward(&fwd.stages[3], &dlogits, &mut grads)?;
            (loss, correct, vec![None, None, None, Some(dfeat)])
        }
        Task::Segment => {
            let masks = batch
                .masks
                .as_ref()
                .ok_or_else(|| Error::Data("segmentation batch has samples without masks".into()))?;
            let s = batch.x.shape();
            let logits = model.segment_logits(&fwd.stages[0], [s[2], s[3], s[4]])?;
            let (l, dlogits) = segmentation_loss(&logits, masks, cfg.loss_weights)?;
            let dstage = model.segment_logits_backward(&fwd.stages[0], &dlogits, &mut grads)?;
            (l * n as f64, 0, vec![Some(dstage), None, None, None])
        }
    };
    model.backward(&fwd.tape, stage_grads, &mut grads)?;
    opt.step(model.params_mut(), &grads, lr);
    model.apply_running_updates(&fwd.tape);
    Ok((loss, correct))
}

fn run_epochs(model: &mut BackboneModel, data: &Dataset, cfg: &TrainConfig, pseudo3d: bool) -> Result<TrainLog> {
    cfg.validate()?;
    let task = task_of(model)?;
    if let Task::Classify(k) = task {
        if let Some(bad) = data.samples.iter().find_map(|s| s.class().filter(|&c| c >= k)) {
            return Err(Error::Data(format!("label {bad} outside the head's {k} classes")));
        }
    }
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let schedule = cfg.schedule_spec();
    let mut opt = Sgd::new(cfg.sgd, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(&schedule, epoch)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| augment(&data.samples[i], &cfg.augment, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = make_batch(&samples, pseudo3d)?;
            let (l, c) = train_step(model, &mut opt, &batch, &task, cfg, lr)?;
            loss += l;
            correct += c;
            step += 1;
        }
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch,
            step,
            lr,
            loss: loss / n,
            accuracy: matches!(task, Task::Classify(_)).then(|| correct as f64 / n),
        };
        log::info!(
            "epoch {} lr {:.5} loss {:.5}{}",
            epoch,
            lr,
            record.loss,
            record.accuracy.map(|a| format!(" acc {a:.4}")).unwrap_or_default()
        );
        log.records.push(record);
    }
    Ok(log)
}

/// Trains a depth-preserving backbone with a classification head on planar
/// images, each reshaped to a one-channel depth-3 volume.
pub fn pretrain(model: &mut BackboneModel, data: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    if !model.config().depth_preserve {
        return Err(Error::Config("pre-training needs a depth-preserving backbone".into()));
    }
    match model.head_kind() {
        Some(HeadKind::Classify { num_classes }) if num_classes == data.num_classes() => {}
        other => {
            return Err(Error::Config(format!(
                "pre-training needs a {}-class classification head, model has {other:?}",
                data.num_classes()
            )))
        }
    }
    if model.config().in_channels != 1 {
        return Err(Error::Config(format!(
            "pseudo-3D input has one channel, backbone expects {}",
            model.config().in_channels
        )));
    }
    let log = run_epochs(model, data, cfg, true)?;
    Ok((model.to_checkpoint(), log))
}

/// Starting weights for fine-tuning.
#[derive(Clone, Debug)]
pub enum Init {
    Scratch,
    /// Backbone weights transplanted from a pre-trained checkpoint.
    Pretrained(Checkpoint),
}

/// Fine-tunes `model` (which carries the task head) on volumetric samples.
/// Returns the trained model, its log and the transplant report when a
/// pre-trained checkpoint was used.
pub fn finetune(
    mut model: BackboneModel,
    data: &Dataset,
    init: &Init,
    cfg: &TrainConfig,
) -> Result<(BackboneModel, TrainLog, Option<ConversionReport>)> {
    let report = match init {
        Init::Scratch => None,
        Init::Pretrained(ckpt) => {
            let (weights, report) = transplant_svd(ckpt, model.config())?;
            model.load_tensors(&weights, false)?;
            Some(report)
        }
    };
    model.set_freeze(cfg.freeze);
    let log = run_epochs(&mut model, data, cfg, false)?;
    Ok((model, log, report))
}
