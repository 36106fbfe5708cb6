//! Joint pretraining on base classes and fine-tuning on novel classes.
//!
//! Randomness is drawn from streams keyed by `(seed, stage, epoch, example)`,
//! so a run resumed after epoch `e` sees exactly the batches, crops and
//! transforms the uninterrupted run would have seen.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment_with, sample_crop_flip, ImageDataset, SplitTag};
use crate::error::{FlatError, Result};
use crate::evaluation::topk_accuracy;
use crate::model::{FlatModel, Head, BASE_HEAD, NOVEL_HEAD, SCALE};
use crate::par::Exec;
use crate::seed::{self, tag};
use crate::tensor::tape::{backward, Tape};
use crate::tensor::{lr_at_epoch, sgd_step, Scalar, SgdState, Tensor};
use crate::transforms::{corners_to_homography, sample_transform, warp_image, TARGET_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Classification plus weighted transform decoding.
    Flat,
    /// Classification only.
    Baseline,
    /// Classification of warped images under their original labels.
    NaiveAugment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the decoding loss.
    pub lambda: f64,
    pub transform_magnitude: f32,
    pub mode: PretrainMode,
    pub crop_pad: usize,
    pub flip_prob: f64,
    /// Score the held-out base split after every epoch.
    pub eval_base: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 32,
            base_lr: 0.01,
            decay_rate: 0.1,
            decay_every: 30,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: 4.0,
            transform_magnitude: crate::transforms::DEFAULT_MAGNITUDE,
            mode: PretrainMode::Flat,
            crop_pad: 4,
            flip_prob: 0.5,
            eval_base: true,
            seed: 0,
        }
    }
}

fn check_prob(field: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(FlatError::config(field, format!("must lie in [0, 1], got {p}")));
    }
    Ok(())
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FlatError::config("pretrain.batch_size", "must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FlatError::config("pretrain.lambda", format!("must be non-negative, got {}", self.lambda)));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(FlatError::config("pretrain.base_lr", format!("must be non-negative, got {}", self.base_lr)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate.is_finite()) {
            return Err(FlatError::config("pretrain.decay_rate", format!("must be positive, got {}", self.decay_rate)));
        }
        if self.decay_every == 0 {
            return Err(FlatError::config("pretrain.decay_every", "must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.transform_magnitude) {
            return Err(FlatError::config(
                "pretrain.transform_magnitude",
                format!("must lie in [0, 0.5), got {}", self.transform_magnitude),
            ));
        }
        check_prob("pretrain.flip_prob", self.flip_prob)?;
        SgdState::new(self.base_lr, self.momentum, self.weight_decay).map_err(|e| match e {
            FlatError::Config { field, msg } => FlatError::config(format!("pretrain.{field}"), msg),
            e => e,
        })?;
        Ok(())
    }

    /// Decoding weight actually applied; only `flat` mode decodes.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            PretrainMode::Flat => self.lambda,
            PretrainMode::Baseline | PretrainMode::NaiveAugment => 0.0,
        }
    }

    fn decodes(&self) -> bool {
        self.effective_lambda() > 0.0
    }
}

/// Fine-tuning regime for novel classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Base and novel rows, scored on base and novel test images.
    AllClasses,
    /// Base and novel rows, scored on novel test images.
    NovelClasses,
    /// Base rows discarded, novel rows only.
    Transfer,
}

impl Setting {
    pub fn head(self) -> Head {
        match self {
            Setting::AllClasses | Setting::NovelClasses => Head::Joint,
            Setting::Transfer => Head::Novel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    Imprint,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub setting: Setting,
    pub freeze_encoder: bool,
    pub init: HeadInit,
    pub k_shot: usize,
    pub crop_pad: usize,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 15,
            batch_size: 32,
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 1e-4,
            setting: Setting::AllClasses,
            freeze_encoder: false,
            init: HeadInit::Imprint,
            k_shot: 1,
            crop_pad: 4,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_shot == 0 {
            return Err(FlatError::config("finetune.k_shot", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(FlatError::config("finetune.batch_size", "must be at least 1"));
        }
        check_prob("finetune.flip_prob", self.flip_prob)?;
        SgdState::new(self.lr, self.momentum, self.weight_decay).map_err(|e| match e {
            FlatError::Config { field, msg } => FlatError::config(format!("finetune.{field}"), msg),
            e => e,
        })?;
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub class_loss: f64,
    pub decode_loss: f64,
    pub total_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub total: f64,
    pub class: f64,
    pub decode: f64,
}

/// Resumable progress of a pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub optimizer: SgdState,
    pub last: StepLosses,
    /// Best held-out base accuracy (or lowest loss when not evaluating)
    /// and the epoch it was reached.
    pub best: Option<(usize, f64)>,
}

impl TrainState {
    pub fn new(cfg: &PretrainConfig) -> Result<Self> {
        Ok(TrainState {
            epoch: 0,
            step: 0,
            seed: cfg.seed,
            optimizer: SgdState::new(cfg.base_lr, cfg.momentum, cfg.weight_decay)?,
            last: StepLosses::default(),
            best: None,
        })
    }
}

/// One pretraining batch. `warped` and `targets` are present whenever the
/// mode needs them.
#[derive(Debug, Clone)]
pub struct PretrainBatch<T: Scalar = f32> {
    pub images: Tensor<T>,
    pub warped: Option<Tensor<T>>,
    pub targets: Option<Tensor<T>>,
    pub labels: Vec<usize>,
}

/// Loss nodes of the pretraining objective on `tape`.
pub struct Objective {
    pub total: crate::tensor::tape::Var,
    pub class: crate::tensor::tape::Var,
    pub decode: Option<crate::tensor::tape::Var>,
}

/// Builds `L_cls + lambda * L_dec` (or the mode's variant) on `tape`.
pub fn objective<T: Scalar>(
    model: &FlatModel<T>,
    tape: &mut Tape<T>,
    batch: &PretrainBatch<T>,
    mode: PretrainMode,
    lambda: f64,
) -> Result<Objective> {
    let warped = || {
        batch
            .warped
            .clone()
            .ok_or_else(|| FlatError::Contract(format!("{mode:?} pretraining needs warped images")))
    };
    match mode {
        PretrainMode::NaiveAugment => {
            let xt = tape.input(warped()?);
            let f = model.encode(tape, xt)?;
            let logits = model.classify(tape, f, Head::Base)?;
            let class = tape.softmax_cross_entropy(logits, &batch.labels)?;
            Ok(Objective { total: class, class, decode: None })
        }
        PretrainMode::Baseline | PretrainMode::Flat => {
            let x = tape.input(batch.images.clone());
            let f = model.encode(tape, x)?;
            let logits = model.classify(tape, f, Head::Base)?;
            let class = tape.softmax_cross_entropy(logits, &batch.labels)?;
            if mode == PretrainMode::Baseline || lambda == 0.0 {
                return Ok(Objective { total: class, class, decode: None });
            }
            let targets = batch
                .targets
                .clone()
                .ok_or_else(|| FlatError::Contract("flat pretraining needs transform targets".into()))?;
            let xt = tape.input(warped()?);
            let ft = model.encode(tape, xt)?;
            let pred = model.decode_transform(tape, f, ft)?;
            let t = tape.input(targets);
            let decode = tape.mse(pred, t)?;
            let weighted = tape.mul_const(decode, T::of(lambda));
            let total = tape.add(class, weighted)?;
            Ok(Objective { total, class, decode: Some(decode) })
        }
    }
}

/// Parameters updated during pretraining in the given mode.
pub fn pretrain_trainable<T: Scalar>(model: &FlatModel<T>, cfg: &PretrainConfig) -> Vec<String> {
    let mut names = model.encoder_param_names();
    if cfg.decodes() {
        names.extend(model.decoder_param_names());
    }
    names.push(BASE_HEAD.to_string());
    names.push(SCALE.to_string());
    names
}

/// Forward, backward and one SGD update on `batch`.
pub fn pretrain_step(
    model: &mut FlatModel,
    batch: &PretrainBatch,
    cfg: &PretrainConfig,
    optimizer: &mut SgdState,
    exec: Exec,
) -> Result<StepLosses> {
    let n_base = model.n_base().ok_or_else(|| FlatError::State("pretraining needs a base head".into()))?;
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= n_base) {
        return Err(FlatError::Index(format!("label {bad} outside the {n_base} base classes")));
    }
    let mut tape = Tape::with_exec(exec);
    let obj = objective(model, &mut tape, batch, cfg.mode, cfg.effective_lambda())?;
    let losses = StepLosses {
        total: tape.value(obj.total)[0] as f64,
        class: tape.value(obj.class)[0] as f64,
        decode: obj.decode.map_or(0.0, |d| tape.value(d)[0] as f64),
    };
    if !(losses.total.is_finite() && losses.class.is_finite() && losses.decode.is_finite()) {
        return Err(FlatError::Numeric(format!("non-finite loss at step: {losses:?}")));
    }
    model.params.zero_grad();
    backward(&tape, obj.total, &mut model.params)?;
    let trainable = pretrain_trainable(model, cfg);
    sgd_step(&mut model.params, &trainable, optimizer)?;
    model.params.zero_grad();
    model.renormalize_heads();
    Ok(losses)
}

/// Augmented (and, when needed, warped) batch for the examples `indices`
/// at `epoch`. Transforms are drawn in every mode to keep the streams
/// aligned across modes.
pub fn prepare_pretrain_batch(
    dataset: &ImageDataset,
    indices: &[usize],
    epoch: usize,
    cfg: &PretrainConfig,
    exec: Exec,
) -> Result<PretrainBatch> {
    let need_warp = cfg.decodes() || cfg.mode == PretrainMode::NaiveAugment;
    let [c, h, w] = dataset.geometry();
    let items = exec.try_map(indices.len(), |b| -> Result<(Tensor, Option<Tensor>, [f32; TARGET_DIM])> {
        let i = indices[b];
        let mut rng = seed::stream(cfg.seed, &[tag::PRETRAIN, tag::EXAMPLE, epoch as u64, i as u64]);
        let cf = sample_crop_flip(&mut rng, cfg.crop_pad, cfg.flip_prob);
        let t = sample_transform(&mut rng, cfg.transform_magnitude)?;
        let img = augment_with(&dataset.image_tensor(i), cfg.crop_pad, cf);
        let warped = if need_warp { Some(warp_image(&img, &corners_to_homography(&t, w, h)?)?) } else { None };
        Ok((img, warped, t.target()))
    })?;
    let mut images = Vec::with_capacity(indices.len() * c * h * w);
    let mut warped = Vec::new();
    let mut targets = Vec::new();
    for (img, wimg, t) in items {
        images.extend_from_slice(img.data());
        if let Some(wimg) = wimg {
            warped.extend_from_slice(wimg.data());
        }
        targets.extend_from_slice(&t);
    }
    let b = indices.len();
    Ok(PretrainBatch {
        images: Tensor::new(&[b, c, h, w], images)?,
        warped: if need_warp { Some(Tensor::new(&[b, c, h, w], warped)?) } else { None },
        targets: if cfg.decodes() { Some(Tensor::new(&[b, TARGET_DIM], targets)?) } else { None },
        labels: indices.iter().map(|&i| dataset.label(i)).collect(),
    })
}

/// Top-1 accuracy of `head` on the examples `indices`, labelled by
/// `label_of`.
pub fn accuracy_on(
    model: &FlatModel,
    dataset: &ImageDataset,
    indices: &[usize],
    head: Head,
    label_of: impl Fn(usize) -> usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(FlatError::Data("no examples to score".into()));
    }
    let mut correct = 0.0;
    for chunk in indices.chunks(128) {
        let feats = model.embed(dataset.batch(chunk))?;
        let logits = model.logits(&feats, head)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| label_of(i)).collect();
        correct += topk_accuracy(&logits, &labels, 1)? * chunk.len() as f64;
    }
    Ok(correct / indices.len() as f64)
}

/// Runs pretraining epochs `state.epoch..cfg.epochs`, calling `on_epoch`
/// after each with the metrics, the model, the updated state and whether
/// the epoch is the best so far.
pub fn pretrain_with(
    model: &mut FlatModel,
    dataset: &ImageDataset,
    cfg: &PretrainConfig,
    state: &mut TrainState,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochMetrics, &FlatModel, &TrainState, bool) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let train = dataset.indices(SplitTag::BaseTrain);
    if train.is_empty() {
        return Err(FlatError::config("pretrain", "the dataset has no base training examples"));
    }
    if dataset.n_base() < 2 {
        return Err(FlatError::config("pretrain", format!("need at least 2 base classes, got {}", dataset.n_base())));
    }
    match model.n_base() {
        Some(n) if n == dataset.n_base() => {}
        other => {
            return Err(FlatError::State(format!(
                "model has {other:?} base rows, dataset has {} base classes",
                dataset.n_base()
            )))
        }
    }
    let held_out = dataset.indices(SplitTag::BaseTest);
    let mut metrics = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = lr_at_epoch(cfg.base_lr, epoch, cfg.decay_rate, cfg.decay_every);
        state.optimizer.learning_rate = lr;
        state.optimizer.epoch = epoch;
        let mut order = train.clone();
        order.shuffle(&mut seed::stream(cfg.seed, &[tag::PRETRAIN, tag::SHUFFLE, epoch as u64]));
        let (mut class, mut decode, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = prepare_pretrain_batch(dataset, chunk, epoch, cfg, exec)?;
            let l = pretrain_step(model, &batch, cfg, &mut state.optimizer, exec)?;
            let n = chunk.len() as f64;
            class += l.class * n;
            decode += l.decode * n;
            total += l.total * n;
            state.step += 1;
            state.last = l;
        }
        let n = order.len() as f64;
        let eval_acc = if cfg.eval_base && !held_out.is_empty() {
            Some(accuracy_on(model, dataset, &held_out, Head::Base, |i| dataset.label(i))?)
        } else {
            None
        };
        let m = EpochMetrics {
            stage: "pretrain".into(),
            epoch,
            lr,
            class_loss: class / n,
            decode_loss: decode / n,
            total_loss: total / n,
            eval_acc,
        };
        state.epoch += 1;
        let better = match (state.best, eval_acc) {
            (None, _) => true,
            (Some((_, b)), Some(acc)) => acc > b,
            (Some((_, b)), None) => -m.total_loss > b,
        };
        if better {
            state.best = Some((epoch, eval_acc.unwrap_or(-m.total_loss)));
        }
        on_epoch(&m, model, state, better)?;
        metrics.push(m);
    }
    Ok(metrics)
}

/// Pretrains from scratch and returns the per-epoch metrics.
pub fn pretrain(model: &mut FlatModel, dataset: &ImageDataset, cfg: &PretrainConfig, exec: Exec) -> Result<Vec<EpochMetrics>> {
    let mut state = TrainState::new(cfg)?;
    pretrain_with(model, dataset, cfg, &mut state, exec, |_, _, _, _| Ok(()))
}

fn check_support(dataset: &ImageDataset, support: &[Vec<usize>], k: usize) -> Result<()> {
    if support.len() < 2 {
        return Err(FlatError::Data(format!("fine-tuning needs at least 2 novel classes, got {}", support.len())));
    }
    for (j, ix) in support.iter().enumerate() {
        if ix.len() != k {
            return Err(FlatError::Data(format!("novel class {j} has {} support examples, expected {k}", ix.len())));
        }
        if let Some(&i) = ix.iter().find(|&&i| i >= dataset.len()) {
            return Err(FlatError::Index(format!("support index {i} outside the dataset")));
        }
    }
    Ok(())
}

/// Embeddings of `support[j]` as one `K×d` tensor per class.
pub fn support_features(model: &FlatModel, dataset: &ImageDataset, support: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    support.iter().map(|ix| model.embed(dataset.batch(ix))).collect()
}

/// Adds a novel head for `support` (`support[j]` holds the examples of
/// novel label `j`) and trains it with cross-entropy.
///
/// The transfer setting removes the base head first. With a joint head the
/// novel labels are offset by the number of base rows.
pub fn finetune(
    model: &mut FlatModel,
    dataset: &ImageDataset,
    support: &[Vec<usize>],
    cfg: &FinetuneConfig,
    exec: Exec,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_support(dataset, support, cfg.k_shot)?;
    if cfg.setting == Setting::Transfer {
        model.drop_base_head();
    } else if model.n_base().is_none() {
        return Err(FlatError::State(format!("{:?} fine-tuning needs the base head", cfg.setting)));
    }
    match cfg.init {
        HeadInit::Imprint => {
            let feats = support_features(model, dataset, support)?;
            model.imprint(&feats)?;
        }
        HeadInit::Random => model.init_novel_random(support.len(), cfg.seed)?,
    }
    let head = cfg.setting.head();
    let offset = if head == Head::Joint { model.n_base().unwrap_or(0) } else { 0 };
    let examples: Vec<(usize, usize)> =
        support.iter().enumerate().flat_map(|(j, ix)| ix.iter().map(move |&i| (i, j + offset))).collect();

    let mut trainable = vec![NOVEL_HEAD.to_string(), SCALE.to_string()];
    if head == Head::Joint {
        trainable.push(BASE_HEAD.to_string());
    }
    if !cfg.freeze_encoder {
        trainable.extend(model.encoder_param_names());
    }
    let encoder = model.encoder_param_names();
    model.set_requires_grad(&encoder, !cfg.freeze_encoder);
    let result = finetune_epochs(model, dataset, &examples, head, &trainable, cfg, exec);
    model.set_requires_grad(&encoder, true);
    result
}

fn finetune_epochs(
    model: &mut FlatModel,
    dataset: &ImageDataset,
    examples: &[(usize, usize)],
    head: Head,
    trainable: &[String],
    cfg: &FinetuneConfig,
    exec: Exec,
) -> Result<Vec<EpochMetrics>> {
    let mut opt = SgdState::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let [c, h, w] = dataset.geometry();
    for epoch in 0..cfg.epochs {
        opt.epoch = epoch;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut seed::stream(cfg.seed, &[tag::FINETUNE, tag::SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs = exec.map(chunk.len(), |b| {
                let (i, _) = examples[chunk[b]];
                let mut rng = seed::stream(cfg.seed, &[tag::FINETUNE, tag::EXAMPLE, epoch as u64, chunk[b] as u64]);
                let cf = sample_crop_flip(&mut rng, cfg.crop_pad, cfg.flip_prob);
                augment_with(&dataset.image_tensor(i), cfg.crop_pad, cf)
            });
            let data = imgs.iter().flat_map(|t| t.data().iter().copied()).collect();
            let x = Tensor::new(&[chunk.len(), c, h, w], data)?;
            let labels: Vec<usize> = chunk.iter().map(|&e| examples[e].1).collect();
            let mut tape = Tape::with_exec(exec);
            let f = if cfg.freeze_encoder {
                let feats = model.embed(x)?;
                tape.input(feats)
            } else {
                let xv = tape.input(x);
                model.encode(&mut tape, xv)?
            };
            let logits = model.classify(&mut tape, f, head)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let l = tape.value(loss)[0] as f64;
            if !l.is_finite() {
                return Err(FlatError::Numeric(format!("non-finite fine-tuning loss at epoch {epoch}")));
            }
            model.params.zero_grad();
            backward(&tape, loss, &mut model.params)?;
            sgd_step(&mut model.params, trainable, &mut opt)?;
            model.params.zero_grad();
            model.renormalize_heads();
            total += l * chunk.len() as f64;
        }
        let mean = total / examples.len() as f64;
        metrics.push(EpochMetrics {
            stage: "finetune".into(),
            epoch,
            lr: cfg.lr,
            class_loss: mean,
            decode_loss: 0.0,
            total_loss: mean,
            eval_acc: None,
        });
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, sample_k_shot, SyntheticShapesConfig};
    use crate::model::{EncoderConfig, ModelConfig};

    fn tiny_model(n_base: usize, size: usize, seed: u64) -> FlatModel {
        let cfg = ModelConfig { encoder: EncoderConfig::uniform(1, size, 2, 8), ..Default::default() };
        FlatModel::new(cfg, n_base, seed).unwrap()
    }

    /// Two classes: bright left half vs. bright right half.
    fn halves() -> ImageDataset {
        let mut images = Vec::new();
        let mut classes = Vec::new();
        let mut splits = Vec::new();
        for c in 0..4 {
            for j in 0..8 {
                let img: Vec<f32> = (0..64)
                    .map(|p| {
                        let x = p % 8;
                        let left = x < 4;
                        let on = if c % 2 == 0 { left } else { !left };
                        if on { 0.6 + 0.04 * j as f32 } else { 0.1 }
                    })
                    .collect();
                images.push(img);
                classes.push(c);
                splits.push(match (c < 2, j < 6) {
                    (true, true) => SplitTag::BaseTrain,
                    (true, false) => SplitTag::BaseTest,
                    (false, true) => SplitTag::NovelTrain,
                    (false, false) => SplitTag::NovelTest,
                });
            }
        }
        let names = ["l", "r", "nl", "nr"].map(String::from).to_vec();
        ImageDataset::new([1, 8, 8], images, classes, splits, names, 2).unwrap()
    }

    fn quick(mode: PretrainMode, lambda: f64, epochs: usize) -> PretrainConfig {
        PretrainConfig {
            epochs,
            batch_size: 4,
            base_lr: 0.05,
            lambda,
            mode,
            crop_pad: 1,
            eval_base: false,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn fresh_class_loss_is_log_c() {
        let d = generate_synthetic(&SyntheticShapesConfig {
            image_size: 8,
            channels: 1,
            examples_per_class: 4,
            k_shot_max: 1,
            n_query: 1,
            ..Default::default()
        })
        .unwrap();
        let model = FlatModel::new(
            ModelConfig { encoder: EncoderConfig::uniform(1, 8, 2, 8), ..Default::default() },
            8,
            0,
        )
        .unwrap();
        let cfg = quick(PretrainMode::Flat, 4.0, 1);
        let idx: Vec<usize> = d.indices(SplitTag::BaseTrain);
        let batch = prepare_pretrain_batch(&d, &idx, 0, &cfg, Exec::Sequential).unwrap();
        let mut tape = Tape::new();
        let obj = objective(&model, &mut tape, &batch, cfg.mode, cfg.lambda).unwrap();
        let lc = tape.value(obj.class)[0] as f64;
        assert!((lc - 8f64.ln()).abs() < 1e-5, "{lc}");
        // zero output layer predicts 0, so the decoding loss is E[t^2]
        let ld = tape.value(obj.decode.unwrap())[0] as f64;
        let direct: f64 = batch.targets.unwrap().data().iter().map(|&t| (t as f64).powi(2)).sum::<f64>() / (idx.len() * 8) as f64;
        assert!((ld - direct).abs() < 1e-6);
        let total = tape.value(obj.total)[0] as f64;
        assert!((total - (lc + 4.0 * ld)).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_label_is_index_error() {
        let d = halves();
        let mut model = tiny_model(2, 8, 0);
        let cfg = quick(PretrainMode::Baseline, 0.0, 1);
        let mut batch = prepare_pretrain_batch(&d, &[0, 1], 0, &cfg, Exec::Sequential).unwrap();
        batch.labels[1] = 2;
        let mut opt = SgdState::new(0.1, 0.9, 0.0).unwrap();
        let err = pretrain_step(&mut model, &batch, &cfg, &mut opt, Exec::Sequential).unwrap_err();
        assert!(matches!(err, FlatError::Index(_)), "{err}");
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let d = halves();
        let mut model = tiny_model(2, 8, 1);
        let before = model.clone();
        let m = pretrain(&mut model, &d, &quick(PretrainMode::Flat, 4.0, 0), Exec::Sequential).unwrap();
        assert!(m.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let d = halves();
        let mut model = tiny_model(2, 8, 2);
        let m = pretrain(&mut model, &d, &quick(PretrainMode::Baseline, 0.0, 8), Exec::Sequential).unwrap();
        assert!(m.last().unwrap().class_loss < m[0].class_loss, "{m:?}");
        assert!(m.iter().all(|e| e.decode_loss == 0.0));
    }

    #[test]
    fn flat_with_zero_lambda_matches_baseline_bitwise() {
        let d = halves();
        let mut a = tiny_model(2, 8, 4);
        let mut b = a.clone();
        let ma = pretrain(&mut a, &d, &quick(PretrainMode::Flat, 0.0, 2), Exec::Sequential).unwrap();
        let mb = pretrain(&mut b, &d, &quick(PretrainMode::Baseline, 4.0, 2), Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn flat_decode_loss_is_non_negative_and_run_is_deterministic() {
        let d = halves();
        let mut a = tiny_model(2, 8, 5);
        let mut b = a.clone();
        let ma = pretrain(&mut a, &d, &quick(PretrainMode::Flat, 4.0, 2), Exec::Sequential).unwrap();
        let mb = pretrain(&mut b, &d, &quick(PretrainMode::Flat, 4.0, 2), Exec::Parallel).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a, b);
        assert!(ma.iter().all(|m| m.decode_loss > 0.0));
    }

    #[test]
    fn naive_augment_trains_without_decoder() {
        let d = halves();
        let mut model = tiny_model(2, 8, 6);
        let dec_before: Vec<Tensor> =
            model.decoder_param_names().iter().map(|n| model.params.by_name(n).unwrap().clone()).collect();
        pretrain(&mut model, &d, &quick(PretrainMode::NaiveAugment, 4.0, 1), Exec::Sequential).unwrap();
        for (n, t) in model.decoder_param_names().iter().zip(dec_before) {
            assert_eq!(model.params.by_name(n).unwrap(), &t);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = halves();
        let cfg = quick(PretrainMode::Flat, 4.0, 3);
        let mut full = tiny_model(2, 8, 7);
        let mut part = full.clone();
        pretrain(&mut full, &d, &cfg, Exec::Sequential).unwrap();

        let mut state = TrainState::new(&cfg).unwrap();
        let two = PretrainConfig { epochs: 2, ..cfg.clone() };
        pretrain_with(&mut part, &d, &two, &mut state, Exec::Sequential, |_, _, _, _| Ok(())).unwrap();
        assert_eq!(state.epoch, 2);
        pretrain_with(&mut part, &d, &cfg, &mut state, Exec::Sequential, |_, _, _, _| Ok(())).unwrap();
        assert_eq!(part, full);
    }

    #[test]
    fn finetune_imprint_zero_epochs_is_pure_imprinting() {
        let d = halves();
        let model = tiny_model(2, 8, 8);
        let ks = sample_k_shot(&d, 2, &mut seed::stream(0, &[])).unwrap();
        let cfg = FinetuneConfig { epochs: 0, k_shot: 2, ..Default::default() };
        let mut tuned = model.clone();
        finetune(&mut tuned, &d, &ks.support, &cfg, Exec::Sequential).unwrap();
        let mut imprinted = model.clone();
        imprinted.imprint(&support_features(&model, &d, &ks.support).unwrap()).unwrap();
        assert_eq!(tuned, imprinted);
    }

    #[test]
    fn finetune_rejects_wrong_support_size() {
        let d = halves();
        let mut model = tiny_model(2, 8, 9);
        let support = vec![vec![16, 17], vec![24]];
        let cfg = FinetuneConfig { k_shot: 2, ..Default::default() };
        assert!(matches!(finetune(&mut model, &d, &support, &cfg, Exec::Sequential), Err(FlatError::Data(_))));
    }

    #[test]
    fn transfer_replaces_base_head_and_keeps_encoder_shapes() {
        let d = halves();
        let mut model = tiny_model(2, 8, 10);
        let shapes: Vec<Vec<usize>> =
            model.encoder_param_names().iter().map(|n| model.params.by_name(n).unwrap().shape().to_vec()).collect();
        let ks = sample_k_shot(&d, 1, &mut seed::stream(1, &[])).unwrap();
        let cfg = FinetuneConfig { epochs: 2, setting: Setting::Transfer, freeze_encoder: true, ..Default::default() };
        let frozen: Vec<Tensor> =
            model.encoder_param_names().iter().map(|n| model.params.by_name(n).unwrap().clone()).collect();
        finetune(&mut model, &d, &ks.support, &cfg, Exec::Sequential).unwrap();
        assert!(model.n_base().is_none());
        assert_eq!(model.n_novel(), Some(2));
        for ((n, s), t) in model.encoder_param_names().iter().zip(shapes).zip(frozen) {
            let p = model.params.by_name(n).unwrap();
            assert_eq!(p.shape(), s.as_slice());
            assert_eq!(p.data(), t.data());
        }
    }

    #[test]
    fn finetune_keeps_support_accuracy_on_toy() {
        let d = halves();
        let mut model = tiny_model(2, 8, 11);
        pretrain(&mut model, &d, &quick(PretrainMode::Baseline, 0.0, 5), Exec::Sequential).unwrap();
        let ks = sample_k_shot(&d, 3, &mut seed::stream(2, &[])).unwrap();
        let flat: Vec<usize> = ks.support.concat();
        let label = |i: usize| d.label(i);
        let mut imprinted = model.clone();
        let cfg0 = FinetuneConfig { epochs: 0, k_shot: 3, setting: Setting::Transfer, ..Default::default() };
        finetune(&mut imprinted, &d, &ks.support, &cfg0, Exec::Sequential).unwrap();
        let before = accuracy_on(&imprinted, &d, &flat, Head::Novel, label).unwrap();
        let cfg = FinetuneConfig { epochs: 20, lr: 0.05, crop_pad: 0, flip_prob: 0.0, ..cfg0 };
        finetune(&mut model, &d, &ks.support, &cfg, Exec::Sequential).unwrap();
        let after = accuracy_on(&model, &d, &flat, Head::Novel, label).unwrap();
        assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = PretrainConfig { lambda: -1.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(FlatError::Config { field, .. }) if field == "pretrain.lambda"));
        let bad = PretrainConfig { momentum: 1.5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(FlatError::Config { field, .. }) if field == "pretrain.momentum"));
        let bad = FinetuneConfig { k_shot: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(FlatError::Config { field, .. }) if field == "finetune.k_shot"));
        assert_eq!(PretrainConfig::default().lambda, 4.0);
        let base = PretrainConfig { mode: PretrainMode::Baseline, ..Default::default() };
        assert_eq!(base.effective_lambda(), 0.0);
    }
}
