//! Controlled motif benchmark: a smooth base signal with injected Drop or
//! Oscillation perturbations whose intervals are recorded as ground truth.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("interval [{start}, {end}) lies outside a series of length {len}")]
    OutOfBounds { start: usize, end: usize, len: usize },
    #[error("Clean is not an injectable motif")]
    CleanMotif,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotifKind {
    Drop,
    Oscillation,
    Clean,
}

impl MotifKind {
    pub const ALL: [MotifKind; 3] = [MotifKind::Drop, MotifKind::Oscillation, MotifKind::Clean];

    pub fn label(self) -> usize {
        match self {
            MotifKind::Drop => 0,
            MotifKind::Oscillation => 1,
            MotifKind::Clean => 2,
        }
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotifInterval {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub kind: MotifKind,
}

/// One multichannel series, stored time-major: `values[t * channels + c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    pub values: Vec<f64>,
    pub len: usize,
    pub channels: usize,
    pub label: Option<usize>,
    pub motifs: Vec<MotifInterval>,
    pub seed: u64,
}

impl TimeSeriesSample {
    pub fn univariate(values: Vec<f64>) -> Self {
        let len = values.len();
        Self {
            values,
            len,
            channels: 1,
            label: None,
            motifs: Vec::new(),
            seed: 0,
        }
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    /// One channel as a contiguous sequence.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.at(t, c)).collect()
    }

    /// Label implied by the annotations: the annotated kind, or Clean if none.
    pub fn annotated_kind(&self) -> MotifKind {
        self.motifs.first().map(|m| m.kind).unwrap_or(MotifKind::Clean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }

    fn valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub length: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub motifs_min: usize,
    pub motifs_max: usize,
    pub motif_len_min: usize,
    pub motif_len_max: usize,
    pub drop_depth: Range,
    /// Cycles per window.
    pub osc_frequency: Range,
    pub osc_amplitude: Range,
    /// Cycles per window.
    pub base_frequency: f64,
    pub base_amplitude: f64,
    pub drift_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            length: 1000,
            n_train: 300,
            n_val: 100,
            n_test: 100,
            motifs_min: 2,
            motifs_max: 4,
            motif_len_min: 40,
            motif_len_max: 80,
            drop_depth: Range::new(-2.5, -1.5),
            osc_frequency: Range::new(15.0, 30.0),
            osc_amplitude: Range::new(0.8, 1.5),
            base_frequency: 2.0,
            base_amplitude: 1.0,
            drift_scale: 0.5,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |field, reason: &str| {
            Err(DataError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.length == 0 {
            return bad("length", "must be at least 1");
        }
        if self.motifs_min == 0 || self.motifs_min > self.motifs_max {
            return bad("motifs_min", "motif count range must be non-empty and start at 1 or more");
        }
        if self.motif_len_min == 0 || self.motif_len_min > self.motif_len_max {
            return bad("motif_len_min", "motif length range must be non-empty");
        }
        if self.motif_len_max > self.length {
            return bad("motif_len_max", "motifs cannot be longer than the series");
        }
        for (field, r) in [
            ("drop_depth", self.drop_depth),
            ("osc_frequency", self.osc_frequency),
            ("osc_amplitude", self.osc_amplitude),
        ] {
            if !r.valid() {
                return bad(field, "range must be finite with lo <= hi");
            }
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std", "must be >= 0");
        }
        if !(self.drift_scale >= 0.0) {
            return bad("drift_scale", "must be >= 0");
        }
        if !self.base_frequency.is_finite() || !self.base_amplitude.is_finite() {
            return bad("base_frequency", "must be finite");
        }
        Ok(())
    }

    /// Largest |value| any generated sample can reach: base amplitude, unit
    /// drift times its scale, the largest motif magnitude (motifs never
    /// overlap), and a 7σ noise margin.
    pub fn envelope(&self) -> f64 {
        let motif = self.drop_depth.lo.abs().max(self.drop_depth.hi.abs()).max(self.osc_amplitude.hi.abs());
        self.base_amplitude.abs() + self.drift_scale + motif + 7.0 * self.noise_std
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sinusoid + normalized random-walk drift + Gaussian noise, fully determined by `seed`.
pub fn generate_base_signal(config: &SyntheticConfig, seed: u64) -> Result<TimeSeriesSample, DataError> {
    config.validate()?;
    let t_len = config.length;
    let mut rng = rng_for(seed);
    let step = Normal::new(0.0, 1.0).expect("unit normal");
    let mut walk = Vec::with_capacity(t_len);
    let mut pos = 0.0f64;
    for _ in 0..t_len {
        pos += step.sample(&mut rng);
        walk.push(pos);
    }
    let peak = walk.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let drift: Vec<f64> = if peak > 0.0 {
        walk.iter().map(|v| v / peak).collect()
    } else {
        vec![0.0; t_len]
    };
    let noise = Normal::new(0.0, config.noise_std).expect("validated noise std");
    let values = (0..t_len)
        .map(|t| {
            let phase = 2.0 * PI * config.base_frequency * t as f64 / t_len as f64;
            let mut v = config.base_amplitude * phase.sin() + config.drift_scale * drift[t];
            if config.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            v
        })
        .collect();
    Ok(TimeSeriesSample {
        values,
        len: t_len,
        channels: 1,
        label: None,
        motifs: Vec::new(),
        seed,
    })
}

/// Per-injection parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotifParams {
    /// Constant offset added over the interval (negative for a drop).
    Drop { depth: f64 },
    /// Hann-windowed sinusoid; `frequency` in cycles per full series length.
    Oscillation { amplitude: f64, frequency: f64 },
}

/// Adds a motif over `[start, start + length)` on every channel and records the annotation.
pub fn inject_motif(
    sample: &mut TimeSeriesSample,
    kind: MotifKind,
    start: usize,
    length: usize,
    params: MotifParams,
) -> Result<(), DataError> {
    if kind == MotifKind::Clean {
        return Err(DataError::CleanMotif);
    }
    let end = start + length;
    if length == 0 || end > sample.len {
        return Err(DataError::OutOfBounds {
            start,
            end,
            len: sample.len,
        });
    }
    let total = sample.len as f64;
    for t in start..end {
        let offset = match params {
            MotifParams::Drop { depth } => depth,
            MotifParams::Oscillation { amplitude, frequency } => {
                let i = (t - start) as f64;
                let window = if length > 1 {
                    0.5 * (1.0 - (2.0 * PI * i / (length - 1) as f64).cos())
                } else {
                    1.0
                };
                amplitude * window * (2.0 * PI * frequency * i / total).sin()
            }
        };
        for c in 0..sample.channels {
            sample.values[t * sample.channels + c] += offset;
        }
    }
    sample.motifs.push(MotifInterval { start, end, kind });
    Ok(())
}

/// Non-overlapping intervals: rejection sampling with 100 attempts per motif,
/// halving the length after each exhausted round.
fn place_intervals(config: &SyntheticConfig, count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut length = rng.random_range(config.motif_len_min..=config.motif_len_max);
        'shrink: loop {
            for _ in 0..100 {
                let start = rng.random_range(0..=config.length - length);
                let end = start + length;
                if placed.iter().all(|&(s, e)| end <= s || start >= e) {
                    placed.push((start, end));
                    break 'shrink;
                }
            }
            if length == 1 {
                break;
            }
            length = (length / 2).max(1);
        }
    }
    placed.sort_unstable();
    placed
}

/// One labelled sample of the given kind.
pub fn generate_sample(config: &SyntheticConfig, kind: MotifKind, seed: u64) -> Result<TimeSeriesSample, DataError> {
    let mut sample = generate_base_signal(config, seed)?;
    sample.label = Some(kind.label());
    if kind == MotifKind::Clean {
        return Ok(sample);
    }
    // separate stream from the base signal
    let mut rng = rng_for(seed ^ 0x9E37_79B9_7F4A_7C15);
    let count = rng.random_range(config.motifs_min..=config.motifs_max);
    for (start, end) in place_intervals(config, count, &mut rng) {
        let params = match kind {
            MotifKind::Drop => MotifParams::Drop {
                depth: config.drop_depth.sample(&mut rng),
            },
            MotifKind::Oscillation => MotifParams::Oscillation {
                amplitude: config.osc_amplitude.sample(&mut rng),
                frequency: config.osc_frequency.sample(&mut rng),
            },
            MotifKind::Clean => unreachable!(),
        };
        inject_motif(&mut sample, kind, start, end - start, params)?;
    }
    Ok(sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<TimeSeriesSample>,
    pub val: Vec<TimeSeriesSample>,
    pub test: Vec<TimeSeriesSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[TimeSeriesSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub const N_CLASSES: usize = 3;

/// Three balanced classes per split; every sample gets its own seed, disjoint
/// across splits.
pub fn generate_dataset(config: &SyntheticConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut next = 0u64;
    let mut make = |n: usize| -> Result<Vec<TimeSeriesSample>, DataError> {
        (0..n)
            .map(|i| {
                let kind = MotifKind::ALL[i % N_CLASSES];
                let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(next);
                next += 1;
                generate_sample(config, kind, seed)
            })
            .collect()
    };
    let train = make(config.n_train)?;
    let val = make(config.n_val)?;
    let test = make(config.n_test)?;
    Ok(Dataset { train, val, test })
}

/// Zeroes a contiguous band of non-DC frequency bins covering `band_fraction`
/// of the positive spectrum (mirrored to keep the spectrum Hermitian) and
/// transforms back.
pub fn frequency_mask_augment(x: &[f64], band_fraction: f64, seed: u64) -> Vec<f64> {
    let n = x.len();
    let positive = n / 2;
    let fraction = band_fraction.clamp(0.0, 1.0);
    let width = (fraction * positive as f64).round() as usize;
    if n < 2 || width == 0 {
        return x.to_vec();
    }
    let mut rng = rng_for(seed);
    let first = rng.random_range(1..=positive - width + 1);
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for bin in first..first + width {
        buf[bin] = Complex::new(0.0, 0.0);
        buf[n - bin] = Complex::new(0.0, 0.0);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}
