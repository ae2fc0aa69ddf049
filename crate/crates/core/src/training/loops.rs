use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Gradients, Tensor, TensorError, Var};
use crate::losses::{reconstruction_loss, tcr_diversity_loss, total_loss, ObjectiveConfig, TcrPooling};
use crate::model::{attention_pool, classify, decode, encode, Bound, Model, ModelConfig, ModelError, ParamGroup, PatchSequence};
use crate::synthetic::{frequency_mask_augment, Dataset, TimeSeriesSample};

use super::mask::{mask_sample, MaskSpec, MaskSplit};
use super::metrics::{compute_metrics, MetricsReport};
use super::optim::{clip_global_norm, Adam};
use super::{derive_seed, streams, AblationMode, TrainConfig, TrainError, UnlabeledSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_rec: f64,
    pub train_div: f64,
    pub train_total: f64,
    pub val_rec: f64,
    pub val_div: f64,
    pub val_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub mode: AblationMode,
    /// Diversity weight actually used.
    pub lambda: f64,
    pub epochs: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub best_val_total: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub freeze_encoder: bool,
    pub epochs: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stopped_early: bool,
}

struct Prepared {
    seq: PatchSequence,
    usable: Vec<usize>,
}

fn prepare(model: &Model, samples: &[TimeSeriesSample]) -> Result<Vec<Prepared>, TrainError> {
    samples
        .iter()
        .map(|s| {
            let seq = model.patchify(s)?;
            let usable = seq.usable();
            Ok(Prepared { seq, usable })
        })
        .collect()
}

fn invalid_objective(e: String) -> TrainError {
    TrainError::InvalidConfig {
        field: "objective",
        reason: e,
    }
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => TrainError::Diverged { epoch, batch },
        other => other,
    }
}

fn augmented(model: &Model, sample: &TimeSeriesSample, band: f64, seed: u64) -> Result<PatchSequence, TrainError> {
    let mut out = sample.clone();
    for c in 0..sample.channels {
        let channel = frequency_mask_augment(&sample.channel(c), band, derive_seed(seed, c as u64, 0));
        for (t, v) in channel.into_iter().enumerate() {
            out.values[t * sample.channels + c] = v;
        }
    }
    Ok(model.patchify(&out)?)
}

struct Item<'a> {
    input: &'a PatchSequence,
    target: &'a PatchSequence,
    split: &'a MaskSplit,
}

fn mean(g: &mut Graph, terms: &[Var]) -> Result<Var, TensorError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Batch-mean reconstruction and diversity terms.
fn batch_objective(
    g: &mut Graph,
    p: &Bound,
    config: &ModelConfig,
    pooling: TcrPooling,
    epsilon: f64,
    items: &[Item],
) -> Result<(Var, Var), TrainError> {
    let mut recs = Vec::with_capacity(items.len());
    let mut tokens = Vec::with_capacity(items.len());
    for item in items {
        let enc = encode(g, p, config, item.input, &item.split.visible, &item.split.masked)?;
        let out = decode(g, p, config, enc.tokens, &item.split.masked)?;
        let target = g.constant(item.target.gather(&item.split.masked));
        recs.push(reconstruction_loss(g, out, target)?);
        tokens.push(enc.tokens);
    }
    let rec = mean(g, &recs)?;
    let div = match pooling {
        TcrPooling::PerSample => {
            let divs = tokens
                .iter()
                .map(|&t| tcr_diversity_loss(g, t, epsilon))
                .collect::<Result<Vec<_>, _>>()?;
            mean(g, &divs)?
        }
        TcrPooling::BatchPooled => {
            let all = g.concat(&tokens, Axis::Rows)?;
            tcr_diversity_loss(g, all, epsilon)?
        }
    };
    Ok((rec, div))
}

fn collect_grads(p: &Bound, grads: &mut Gradients, trainable: impl Fn(&str) -> bool) -> BTreeMap<String, Tensor> {
    p.iter()
        .filter(|(name, _)| trainable(name))
        .filter_map(|(name, &v)| grads.take(v).map(|t| (name.clone(), t)))
        .collect()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Masked-reconstruction pre-training of the encoder and decoder.
///
/// Only [`UnlabeledSet`]s are accepted, so labels cannot influence this stage.
/// The model ends with the parameters of the epoch with the lowest validation
/// total loss.
pub fn pretrain(
    model: &mut Model,
    train: &UnlabeledSet,
    val: &UnlabeledSet,
    objective: &ObjectiveConfig,
    config: &TrainConfig,
) -> Result<PretrainReport, TrainError> {
    config.validate()?;
    objective.validate().map_err(invalid_objective)?;
    let lambda = match config.mode {
        AblationMode::Scratch => return Err(TrainError::ScratchPretrain),
        AblationMode::RecOnly => 0.0,
        AblationMode::RecPlusDiv => objective.lambda,
    };
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let train_prep = prepare(model, train.samples())?;
    let val_prep = prepare(model, val.samples())?;
    let ratio = objective.mask_ratio;
    let val_masks = val_prep
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let seed = derive_seed(config.seed, streams::VAL_MASK, i as u64);
            mask_sample(&v.usable, MaskSpec { ratio, seed })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let trainable = |name: &str| ParamGroup::of(name) != ParamGroup::Head;
    let mut adam = Adam::new(config.learning_rate_pretrain, config.beta1, config.beta2, config.adam_eps);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, crate::model::ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let order = shuffled(train_prep.len(), derive_seed(config.seed, streams::SHUFFLE, epoch as u64));
        let (mut sum_rec, mut sum_div, mut sum_total) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut step = || -> Result<(f64, f64, f64), TrainError> {
                let mut splits = Vec::with_capacity(chunk.len());
                let mut inputs = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let tag = ((epoch as u64) << 32) | i as u64;
                    let seed = derive_seed(config.seed, streams::TRAIN_MASK, tag);
                    splits.push(mask_sample(&train_prep[i].usable, MaskSpec { ratio, seed })?);
                    if config.augment_band_fraction > 0.0 {
                        let seed = derive_seed(config.seed, streams::AUGMENT, tag);
                        inputs.push(Some(augmented(model, &train.samples()[i], config.augment_band_fraction, seed)?));
                    } else {
                        inputs.push(None);
                    }
                }
                let items: Vec<Item> = chunk
                    .iter()
                    .zip(&splits)
                    .zip(&inputs)
                    .map(|((&i, split), input)| Item {
                        input: input.as_ref().unwrap_or(&train_prep[i].seq),
                        target: &train_prep[i].seq,
                        split,
                    })
                    .collect();
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, trainable);
                let (rec, div) =
                    batch_objective(&mut g, &p, &model.config, objective.tcr_pooling, objective.epsilon, &items)?;
                let total = total_loss(&mut g, rec, div, lambda)?;
                let values = (g.value(rec).item(), g.value(div).item(), g.value(total).item());
                let mut grads = g.backward(total)?;
                let mut grads = collect_grads(&p, &mut grads, trainable);
                clip_global_norm(&mut grads, config.grad_clip);
                adam.apply(&mut model.params, &grads);
                Ok(values)
            };
            let (rec, div, total) = step().map_err(diverged(epoch, b))?;
            let w = chunk.len() as f64;
            sum_rec += rec * w;
            sum_div += div * w;
            sum_total += total * w;
        }
        let n = train_prep.len() as f64;

        let (mut val_rec, mut val_div) = (0.0, 0.0);
        for (chunk, masks) in val_prep.chunks(config.batch_size).zip(val_masks.chunks(config.batch_size)) {
            let items: Vec<Item> = chunk
                .iter()
                .zip(masks)
                .map(|(v, split)| Item {
                    input: &v.seq,
                    target: &v.seq,
                    split,
                })
                .collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, |_| false);
            let (rec, div) = batch_objective(&mut g, &p, &model.config, objective.tcr_pooling, objective.epsilon, &items)
                .map_err(diverged(epoch, usize::MAX))?;
            let w = chunk.len() as f64;
            val_rec += g.value(rec).item() * w;
            val_div += g.value(div).item() * w;
        }
        let nv = val_prep.len() as f64;
        let (val_rec, val_div) = (val_rec / nv, val_div / nv);
        let val_total = val_rec + lambda * val_div;
        epochs.push(PretrainEpoch {
            epoch,
            train_rec: sum_rec / n,
            train_div: sum_div / n,
            train_total: sum_total / n,
            val_rec,
            val_div,
            val_total,
        });

        if best.as_ref().is_none_or(|(b, _, _)| val_total < *b) {
            best = Some((val_total, epoch, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_total, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(PretrainReport {
        mode: config.mode,
        lambda,
        epochs,
        best_epoch,
        best_val_total,
        stopped_early,
    })
}

fn labels_of(samples: &[TimeSeriesSample], n_classes: usize) -> Result<Vec<usize>, TrainError> {
    samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let label = s.label.ok_or(TrainError::MissingLabel { index })?;
            if label >= n_classes {
                return Err(TrainError::LabelOutOfRange { index, label, n_classes });
            }
            Ok(label)
        })
        .collect()
}

/// Supervised training of the classification path with early stopping on
/// validation macro-F1. The encoder sees every usable patch.
pub fn finetune(
    model: &mut Model,
    train: &[TimeSeriesSample],
    val: &[TimeSeriesSample],
    objective: &ObjectiveConfig,
    config: &TrainConfig,
) -> Result<FinetuneReport, TrainError> {
    config.validate()?;
    objective.validate().map_err(invalid_objective)?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let n_classes = model.config.n_classes;
    let labels = labels_of(train, n_classes)?;
    labels_of(val, n_classes)?;
    if let Some(class) = (0..n_classes).find(|c| !labels.contains(c)) {
        return Err(TrainError::MissingClass { class });
    }
    let prep = prepare(model, train)?;
    let freeze = config.freeze_encoder;
    let trainable = |name: &str| match ParamGroup::of(name) {
        ParamGroup::Head => true,
        ParamGroup::Encoder => !freeze,
        ParamGroup::Decoder => false,
    };
    let cached: Vec<Tensor> = if freeze {
        prep.iter()
            .map(|v| Ok(model.encode(&v.seq, &v.usable, &[])?.into_tensor()))
            .collect::<Result<_, TrainError>>()?
    } else {
        Vec::new()
    };

    let mut adam = Adam::new(config.learning_rate_finetune, config.beta1, config.beta2, config.adam_eps);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, crate::model::ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.finetune_max_epochs {
        let order = shuffled(prep.len(), derive_seed(config.seed, streams::FINETUNE_SHUFFLE, epoch as u64));
        let mut sum_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut step = || -> Result<f64, TrainError> {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, trainable);
                let mut logits = Vec::with_capacity(chunk.len());
                let mut divs = Vec::new();
                for &i in chunk {
                    let tokens = if freeze {
                        g.constant(cached[i].clone())
                    } else {
                        encode(&mut g, &p, &model.config, &prep[i].seq, &prep[i].usable, &[])?.tokens
                    };
                    if config.finetune_lambda > 0.0 {
                        divs.push(tcr_diversity_loss(&mut g, tokens, objective.epsilon)?);
                    }
                    let (z, _) = attention_pool(&mut g, &p, tokens)?;
                    logits.push(classify(&mut g, &p, z)?);
                }
                let logits = g.concat(&logits, Axis::Rows)?;
                let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let ce = g.cross_entropy(logits, &targets)?;
                let loss = if divs.is_empty() {
                    ce
                } else {
                    let div = mean(&mut g, &divs)?;
                    total_loss(&mut g, ce, div, config.finetune_lambda)?
                };
                let value = g.value(loss).item();
                let mut grads = g.backward(loss)?;
                let mut grads = collect_grads(&p, &mut grads, trainable);
                clip_global_norm(&mut grads, config.grad_clip);
                adam.apply(&mut model.params, &grads);
                Ok(value)
            };
            sum_loss += step().map_err(diverged(epoch, b))? * chunk.len() as f64;
        }

        let val_report = evaluate(model, val)?;
        let f1 = val_report.f1;
        epochs.push(FinetuneEpoch {
            epoch,
            train_loss: sum_loss / prep.len() as f64,
            val: val_report,
        });
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_f1, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(FinetuneReport {
        freeze_encoder: freeze,
        epochs,
        best_epoch,
        best_val_f1,
        stopped_early,
    })
}

/// Metrics of the full-series classification path on labeled samples.
pub fn evaluate(model: &Model, samples: &[TimeSeriesSample]) -> Result<MetricsReport, TrainError> {
    let labels = labels_of(samples, model.config.n_classes)?;
    let scores = samples
        .iter()
        .map(|s| Ok(model.predict(s)?.probabilities))
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(compute_metrics(&labels, &scores, model.config.n_classes))
}

/// One arm of the ablation: optional pre-training, fine-tuning, test metrics.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub model: Model,
    pub pretrain: Option<PretrainReport>,
    pub finetune: FinetuneReport,
    pub test: MetricsReport,
}

/// Pre-trains on the unlabeled train split (unless scratch), fine-tunes on
/// `labeled` (the train split when `None`), and evaluates on the test split.
pub fn run_arm(
    dataset: &Dataset,
    labeled: Option<&[TimeSeriesSample]>,
    model_config: &ModelConfig,
    objective: &ObjectiveConfig,
    config: &TrainConfig,
) -> Result<ArmOutcome, TrainError> {
    let mut model = Model::new(model_config.clone(), derive_seed(config.seed, streams::INIT, 0))?;
    let pretrain_report = if config.mode == AblationMode::Scratch {
        None
    } else {
        Some(pretrain(
            &mut model,
            &UnlabeledSet::from_samples(&dataset.train),
            &UnlabeledSet::from_samples(&dataset.val),
            objective,
            config,
        )?)
    };
    let finetune_report = finetune(&mut model, labeled.unwrap_or(&dataset.train), &dataset.val, objective, config)?;
    let test = evaluate(&model, &dataset.test)?;
    Ok(ArmOutcome {
        model,
        pretrain: pretrain_report,
        finetune: finetune_report,
        test,
    })
}
