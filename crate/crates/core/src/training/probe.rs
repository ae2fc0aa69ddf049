use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::{argmax, Model};
use crate::synthetic::{MotifInterval, MotifKind, TimeSeriesSample};

use super::TrainError;

/// Attention read-outs for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAttention {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    /// Pooling weight of each token.
    pub alpha: Vec<f64>,
    /// `k × n_patches` encoder cross-attention averaged over heads and layers.
    pub attention: Tensor,
    pub motifs: Vec<MotifInterval>,
    /// Fraction of each patch's time steps that lie inside a motif.
    pub coverage: Vec<f64>,
}

/// Per-class summary of how pooling weight is spread over the tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAllocation {
    pub class: usize,
    pub n: usize,
    pub mean_alpha: Vec<f64>,
    pub argmax_token: usize,
    /// Mean cross-attention mass the argmax token places inside motif
    /// intervals; absent for the motif-free class.
    pub inside_mass: Option<f64>,
    /// Mean fraction of the series covered by motifs, the mass a uniform
    /// attention map would place there.
    pub interval_fraction: Option<f64>,
}

impl ClassAllocation {
    /// Whether the dominant token attends to motifs more than uniform attention would.
    pub fn localizes(&self) -> Option<bool> {
        Some(self.inside_mass? > self.interval_fraction?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub k: usize,
    pub classes: Vec<ClassAllocation>,
    /// The Drop and Oscillation classes put most pooling weight on different tokens.
    pub drop_oscillation_distinct: bool,
    /// Both motif classes' dominant tokens localize better than uniform.
    pub localizes: bool,
    pub samples: Vec<SampleAttention>,
}

fn patch_coverage(sample: &TimeSeriesSample, patch_size: usize, n_patches: usize) -> Vec<f64> {
    let mut inside = vec![false; sample.len];
    for m in &sample.motifs {
        for flag in &mut inside[m.start.min(sample.len)..m.end.min(sample.len)] {
            *flag = true;
        }
    }
    (0..n_patches)
        .map(|p| {
            let lo = p * patch_size;
            let hi = ((p + 1) * patch_size).min(sample.len);
            let hits = inside[lo..hi].iter().filter(|&&b| b).count();
            hits as f64 / (hi - lo) as f64
        })
        .collect()
}

/// Class-wise pooling allocation and motif localization of a trained model.
pub fn disentanglement_probe(model: &Model, samples: &[TimeSeriesSample]) -> Result<ProbeReport, TrainError> {
    let k = model.config.k;
    let n_classes = model.config.n_classes;
    let mut records = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let label = s.label.ok_or(TrainError::MissingLabel { index })?;
        if label >= n_classes {
            return Err(TrainError::LabelOutOfRange { index, label, n_classes });
        }
        let motif_class = matches!(MotifKind::from_label(label), Some(MotifKind::Drop | MotifKind::Oscillation));
        if motif_class && s.motifs.is_empty() {
            return Err(TrainError::MissingAnnotations { index, class: label });
        }
        let pred = model.predict(s)?;
        let n_patches = pred.attention.cols();
        records.push(SampleAttention {
            index,
            label,
            predicted: pred.predicted_class(),
            alpha: pred.alpha,
            attention: pred.attention,
            motifs: s.motifs.clone(),
            coverage: patch_coverage(s, model.config.patch_size, n_patches),
        });
    }

    let mut classes = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let members: Vec<&SampleAttention> = records.iter().filter(|r| r.label == class).collect();
        let n = members.len();
        let mut mean_alpha = vec![0.0; k];
        for r in &members {
            for (m, a) in mean_alpha.iter_mut().zip(&r.alpha) {
                *m += a / n as f64;
            }
        }
        let argmax_token = argmax(&mean_alpha);
        let has_motifs = n > 0 && members.iter().all(|r| !r.motifs.is_empty());
        let (inside_mass, interval_fraction) = if has_motifs {
            let mut mass = 0.0;
            let mut fraction = 0.0;
            for (r, s) in members.iter().map(|r| (r, &samples[r.index])) {
                let row = r.attention.row(argmax_token);
                mass += row.iter().zip(&r.coverage).map(|(a, c)| a * c).sum::<f64>();
                let covered: f64 = r.coverage.iter().enumerate().map(|(p, c)| {
                    let lo = p * model.config.patch_size;
                    let hi = ((p + 1) * model.config.patch_size).min(s.len);
                    c * (hi - lo) as f64
                }).sum();
                fraction += covered / s.len as f64;
            }
            (Some(mass / n as f64), Some(fraction / n as f64))
        } else {
            (None, None)
        };
        classes.push(ClassAllocation {
            class,
            n,
            mean_alpha,
            argmax_token,
            inside_mass,
            interval_fraction,
        });
    }

    let drop = MotifKind::Drop.label();
    let osc = MotifKind::Oscillation.label();
    let motif_classes = [drop, osc].into_iter().filter(|&c| c < n_classes);
    let localizes = motif_classes
        .clone()
        .all(|c| classes[c].localizes().unwrap_or(false));
    let drop_oscillation_distinct =
        drop < n_classes && osc < n_classes && classes[drop].argmax_token != classes[osc].argmax_token;
    Ok(ProbeReport {
        k,
        classes,
        drop_oscillation_distinct,
        localizes,
        samples: records,
    })
}
