//! Masked pre-training, fine-tuning with attention pooling, evaluation, and
//! the attention-allocation probe.

mod loops;
mod mask;
mod metrics;
mod optim;
mod probe;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::TensorError;
use crate::model::ModelError;
use crate::synthetic::TimeSeriesSample;

pub use loops::{
    evaluate, finetune, pretrain, run_arm, ArmOutcome, FinetuneEpoch, FinetuneReport, PretrainEpoch, PretrainReport,
};
pub use mask::{mask_sample, masked_count, MaskSpec, MaskSplit};
pub use metrics::{binary_auroc, compute_metrics, MetricsReport};
pub use optim::{clip_global_norm, global_norm, Adam};
pub use probe::{disentanglement_probe, ClassAllocation, ProbeReport, SampleAttention};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("masking {masked} of {n} patches leaves nothing visible")]
    MaskAll { n: usize, masked: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("class {class} has no training samples")]
    MissingClass { class: usize },
    #[error("sample {index} has no label")]
    MissingLabel { index: usize },
    #[error("label {label} of sample {index} is outside 0..{n_classes}")]
    LabelOutOfRange { index: usize, label: usize, n_classes: usize },
    #[error("sample {index} of class {class} carries no motif annotation")]
    MissingAnnotations { index: usize, class: usize },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("scratch mode has no pre-training stage")]
    ScratchPretrain,
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Which pre-training objective precedes fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// No pre-training; fine-tune from random initialization.
    Scratch,
    /// Reconstruction only (λ forced to 0).
    #[serde(alias = "rec")]
    RecOnly,
    /// Reconstruction plus the diversity penalty.
    #[default]
    #[serde(alias = "rec_div")]
    RecPlusDiv,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Scratch => "scratch",
            AblationMode::RecOnly => "rec_only",
            AblationMode::RecPlusDiv => "rec_plus_div",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate_pretrain: f64,
    pub learning_rate_finetune: f64,
    pub max_epochs: usize,
    pub finetune_max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub mode: AblationMode,
    /// Fine-tune only the pooling query and classifier.
    pub freeze_encoder: bool,
    /// Diversity weight during fine-tuning.
    pub finetune_lambda: f64,
    /// Width of the zeroed frequency band applied to the encoder input during
    /// pre-training, as a fraction of the positive spectrum; 0 disables it.
    pub augment_band_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate_pretrain: 1e-3,
            learning_rate_finetune: 1e-4,
            max_epochs: 100,
            finetune_max_epochs: 100,
            early_stop_patience: 10,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            seed: 0,
            mode: AblationMode::RecPlusDiv,
            freeze_encoder: false,
            finetune_lambda: 0.0,
            augment_band_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, reason: String| Err(TrainError::InvalidConfig { field, reason });
        for (field, v) in [
            ("learning_rate_pretrain", self.learning_rate_pretrain),
            ("learning_rate_finetune", self.learning_rate_finetune),
            ("adam_eps", self.adam_eps),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, format!("must be finite and > 0, got {v}"));
            }
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(field, format!("must lie in [0, 1), got {v}"));
            }
        }
        for (field, v) in [
            ("max_epochs", self.max_epochs),
            ("finetune_max_epochs", self.finetune_max_epochs),
            ("early_stop_patience", self.early_stop_patience),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1".into());
            }
        }
        if !(self.finetune_lambda >= 0.0 && self.finetune_lambda.is_finite()) {
            return bad("finetune_lambda", format!("must be finite and >= 0, got {}", self.finetune_lambda));
        }
        if !(0.0..1.0).contains(&self.augment_band_fraction) {
            return bad(
                "augment_band_fraction",
                format!("must lie in [0, 1), got {}", self.augment_band_fraction),
            );
        }
        Ok(())
    }
}

/// Signals with labels and annotations removed; the only input pre-training accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet(Vec<TimeSeriesSample>);

impl UnlabeledSet {
    pub fn from_samples(samples: &[TimeSeriesSample]) -> Self {
        Self(
            samples
                .iter()
                .map(|s| TimeSeriesSample {
                    values: s.values.clone(),
                    len: s.len,
                    channels: s.channels,
                    label: None,
                    motifs: Vec::new(),
                    seed: s.seed,
                })
                .collect(),
        )
    }

    pub fn samples(&self) -> &[TimeSeriesSample] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for `(stream, index)` under a run seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(base) ^ stream) ^ index)
}

/// Stream tags for [`derive_seed`].
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_MASK: u64 = 3;
    pub const VAL_MASK: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const FINETUNE_SHUFFLE: u64 = 6;
    pub const SUBSET: u64 = 7;
}

/// `per_class` samples of each class, chosen by a seeded shuffle and returned
/// in their original order.
pub fn label_scarce_subset(
    samples: &[TimeSeriesSample],
    per_class: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<TimeSeriesSample>, TrainError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::SUBSET, 0)));
    let mut taken = vec![0usize; n_classes];
    let mut keep = vec![false; samples.len()];
    for i in order {
        let label = samples[i].label.ok_or(TrainError::MissingLabel { index: i })?;
        if label >= n_classes {
            return Err(TrainError::LabelOutOfRange { index: i, label, n_classes });
        }
        if taken[label] < per_class {
            taken[label] += 1;
            keep[i] = true;
        }
    }
    if let Some(class) = taken.iter().position(|&t| t == 0) {
        return Err(TrainError::MissingClass { class });
    }
    Ok(samples.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s.clone()).collect())
}
