use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;

/// Masking request for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    pub seed: u64,
}

/// A partition of the usable patch positions; both sides sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSplit {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

/// `round(r · n)` with halves rounded up.
pub fn masked_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

/// Draws a uniform subset of `positions` of size [`masked_count`] to hide.
pub fn mask_sample(positions: &[usize], spec: MaskSpec) -> Result<MaskSplit, TrainError> {
    if !(0.0..1.0).contains(&spec.ratio) {
        return Err(TrainError::InvalidConfig {
            field: "mask_ratio",
            reason: format!("must lie in [0, 1), got {}", spec.ratio),
        });
    }
    let n = positions.len();
    let count = masked_count(spec.ratio, n);
    if count >= n {
        return Err(TrainError::MaskAll { n, masked: count });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut hidden = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, count) {
        hidden[i] = true;
    }
    let (mut visible, mut masked) = (Vec::with_capacity(n - count), Vec::with_capacity(count));
    for (&p, h) in positions.iter().zip(hidden) {
        if h {
            masked.push(p);
        } else {
            visible.push(p);
        }
    }
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskSplit { visible, masked })
}
