use crate::autodiff::Tensor;
use crate::synthetic::TimeSeriesSample;

use super::ModelError;

/// Raw patch values of one sample, before projection.
///
/// Row `i` holds patch `i` flattened time-major (`patch_size × C` values).
/// When `T` is not a multiple of the patch size the series is right-padded by
/// repeating its last time step, and the patch that contains padding is flagged;
/// flagged patches never enter the encoder and are never reconstruction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Tensor,
    pub positions: Vec<usize>,
    pub padded: Vec<bool>,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.channels
    }

    /// Positions of patches without padding, in order.
    pub fn usable(&self) -> Vec<usize> {
        self.positions.iter().copied().filter(|&p| !self.padded[p]).collect()
    }

    pub fn patch(&self, position: usize) -> &[f64] {
        self.patches.row(position)
    }

    /// Stacks the patches at `positions` into a `len × patch_dim` matrix.
    pub fn gather(&self, positions: &[usize]) -> Tensor {
        let w = self.patch_dim();
        let mut data = Vec::with_capacity(positions.len() * w);
        for &p in positions {
            data.extend_from_slice(self.patch(p));
        }
        Tensor::new(vec![positions.len(), w], data).expect("gathered rows match patch width")
    }
}

pub fn patchify(sample: &TimeSeriesSample, patch_size: usize) -> Result<PatchSequence, ModelError> {
    if patch_size == 0 {
        return Err(ModelError::InvalidConfig {
            field: "patch_size",
            reason: "must be at least 1".into(),
        });
    }
    if sample.len == 0 {
        return Err(ModelError::EmptyInput);
    }
    let c = sample.channels;
    let n = sample.len.div_ceil(patch_size);
    let width = patch_size * c;
    let mut data = Vec::with_capacity(n * width);
    for p in 0..n {
        for i in 0..patch_size {
            let t = (p * patch_size + i).min(sample.len - 1);
            data.extend_from_slice(&sample.values[t * c..(t + 1) * c]);
        }
    }
    let padded = (0..n).map(|p| (p + 1) * patch_size > sample.len).collect();
    Ok(PatchSequence {
        patches: Tensor::new(vec![n, width], data)?,
        positions: (0..n).collect(),
        padded,
        patch_size,
        channels: c,
    })
}

/// Fixed sinusoidal embedding, `sin` on even and `cos` on odd dimensions.
/// Bit-identical across build profiles and platforms.
pub fn sinusoidal_embedding(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = position as f64 / libm::pow(10000.0, 2.0 * i / d as f64);
            if j % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            }
        })
        .collect()
}

pub fn positional_table(positions: &[usize], d: usize) -> Tensor {
    let data = positions.iter().flat_map(|&p| sinusoidal_embedding(p, d)).collect();
    Tensor::new(vec![positions.len(), d], data).expect("table shape")
}
