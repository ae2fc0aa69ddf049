//! Dataset and checkpoint files.
//!
//! A dataset split is a text header line
//! `TSFP-DATA v1; T=<int>; C=<int>; n=<int>; classes=<int>`, then the signal
//! blocks of all samples as little-endian `f64`, then a JSON footer holding
//! labels, motif annotations, seeds and the generating config.
//!
//! A checkpoint is a JSON manifest next to a little-endian `f64` blob; the
//! manifest maps every parameter name to its shape and byte offset.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::losses::ObjectiveConfig;
use crate::model::{Model, ModelConfig, ModelError, ParamStore};
use crate::synthetic::{MotifInterval, SyntheticConfig, TimeSeriesSample};

pub const DATA_MAGIC: &str = "TSFP-DATA v1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DataFooter {
    labels: Vec<Option<usize>>,
    motifs: Vec<Vec<MotifInterval>>,
    seeds: Vec<u64>,
    config: Option<SyntheticConfig>,
}

/// A split read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DataFile {
    pub samples: Vec<TimeSeriesSample>,
    pub n_classes: usize,
    pub config: Option<SyntheticConfig>,
}

pub fn encode_dataset(samples: &[TimeSeriesSample], n_classes: usize, config: Option<&SyntheticConfig>) -> Result<Vec<u8>, IoError> {
    let (len, channels) = samples.first().map(|s| (s.len, s.channels)).unwrap_or((0, 1));
    if let Some(i) = samples.iter().position(|s| s.len != len || s.channels != channels) {
        return Err(IoError::Format(format!("sample {i} has a different length or channel count")));
    }
    let mut out = format!("{DATA_MAGIC}; T={len}; C={channels}; n={}; classes={n_classes}\n", samples.len()).into_bytes();
    for s in samples {
        for v in &s.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let footer = DataFooter {
        labels: samples.iter().map(|s| s.label).collect(),
        motifs: samples.iter().map(|s| s.motifs.clone()).collect(),
        seeds: samples.iter().map(|s| s.seed).collect(),
        config: config.cloned(),
    };
    out.extend_from_slice(&serde_json::to_vec(&footer)?);
    Ok(out)
}

fn header_field(part: Option<&str>, key: &str) -> Result<usize, IoError> {
    part.and_then(|p| p.trim().strip_prefix(key))
        .and_then(|p| p.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| IoError::Format(format!("header field {key} missing or invalid")))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DataFile, IoError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| IoError::Format("no header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| IoError::Format("header is not text".into()))?;
    let mut parts = header.split(';');
    if parts.next() != Some(DATA_MAGIC) {
        return Err(IoError::Format(format!("expected {DATA_MAGIC:?} header")));
    }
    let len = header_field(parts.next(), "T")?;
    let channels = header_field(parts.next(), "C")?;
    let n = header_field(parts.next(), "n")?;
    let n_classes = header_field(parts.next(), "classes")?;
    let per_sample = len * channels;
    let body_start = newline + 1;
    let body_end = body_start + n * per_sample * 8;
    if bytes.len() < body_end {
        return Err(IoError::Format("signal blocks truncated".into()));
    }
    let footer: DataFooter = serde_json::from_slice(&bytes[body_end..])?;
    if footer.labels.len() != n || footer.motifs.len() != n || footer.seeds.len() != n {
        return Err(IoError::Format("footer does not match sample count".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let block = &bytes[body_start + i * per_sample * 8..body_start + (i + 1) * per_sample * 8];
        let values = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        samples.push(TimeSeriesSample {
            values,
            len,
            channels,
            label: footer.labels[i],
            motifs: footer.motifs[i].clone(),
            seed: footer.seeds[i],
        });
    }
    Ok(DataFile {
        samples,
        n_classes,
        config: footer.config,
    })
}

/// Writes through a temporary sibling and renames, so a failed write leaves no partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(fs_err(&tmp))?;
    f.write_all(bytes).map_err(fs_err(&tmp))?;
    f.sync_all().map_err(fs_err(&tmp))?;
    fs::rename(&tmp, path).map_err(fs_err(path))
}

pub fn write_dataset(path: &Path, samples: &[TimeSeriesSample], n_classes: usize, config: Option<&SyntheticConfig>) -> Result<(), IoError> {
    write_atomic(path, &encode_dataset(samples, n_classes, config)?)
}

pub fn read_dataset(path: &Path) -> Result<DataFile, IoError> {
    decode_dataset(&fs::read(path).map_err(fs_err(path))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model_config: ModelConfig,
    pub objective_config: ObjectiveConfig,
    /// Byte offsets into the blob.
    pub parameters: BTreeMap<String, ParamEntry>,
    pub blob_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub objective: ObjectiveConfig,
}

pub fn encode_checkpoint(model: &Model, objective: &ObjectiveConfig) -> (CheckpointManifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut parameters = BTreeMap::new();
    for (name, t) in model.params.iter() {
        parameters.insert(
            name.to_string(),
            ParamEntry {
                shape: t.shape().to_vec(),
                offset: blob.len(),
            },
        );
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        model_config: model.config.clone(),
        objective_config: *objective,
        parameters,
        blob_bytes: blob.len(),
    };
    (manifest, blob)
}

pub fn decode_checkpoint(manifest: &CheckpointManifest, blob: &[u8]) -> Result<Checkpoint, IoError> {
    if blob.len() != manifest.blob_bytes {
        return Err(IoError::Format(format!(
            "blob has {} bytes, manifest expects {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut params = ParamStore::default();
    for (name, entry) in &manifest.parameters {
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + count * 8;
        if end > blob.len() {
            return Err(IoError::Format(format!("parameter {name} runs past the blob")));
        }
        let data = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| IoError::Format(format!("{name}: {e}")))?;
        params.insert(name.clone(), t);
    }
    Ok(Checkpoint {
        model: Model::from_params(manifest.model_config.clone(), params)?,
        objective: manifest.objective_config,
    })
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "checkpoint.bin";

/// Writes `checkpoint.json` and `checkpoint.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, model: &Model, objective: &ObjectiveConfig) -> Result<(), IoError> {
    let (manifest, blob) = encode_checkpoint(model, objective);
    write_atomic(&dir.join(CHECKPOINT_BLOB), &blob)?;
    write_atomic(&dir.join(CHECKPOINT_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, IoError> {
    let manifest_path = dir.join(CHECKPOINT_MANIFEST);
    let blob_path = dir.join(CHECKPOINT_BLOB);
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path).map_err(fs_err(&manifest_path))?)?;
    let blob = fs::read(&blob_path).map_err(fs_err(&blob_path))?;
    decode_checkpoint(&manifest, &blob)
}

/// Scientific notation with 17 significant digits, exact on round trip.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_dataset;

    fn tiny() -> (SyntheticConfig, Vec<TimeSeriesSample>) {
        let cfg = SyntheticConfig {
            length: 64,
            n_train: 6,
            n_val: 3,
            n_test: 3,
            motif_len_min: 8,
            motif_len_max: 12,
            seed: 3,
            ..Default::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        (cfg, data.train)
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let (cfg, samples) = tiny();
        let bytes = encode_dataset(&samples, 3, Some(&cfg)).unwrap();
        assert!(bytes.starts_with(b"TSFP-DATA v1; T=64; C=1; n=6; classes=3\n"));
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back.samples, samples);
        assert_eq!(back.config, Some(cfg));
        assert_eq!(back.n_classes, 3);
        assert_eq!(encode_dataset(&back.samples, 3, back.config.as_ref()).unwrap(), bytes);
    }

    #[test]
    fn corrupt_datasets_are_rejected() {
        let (cfg, samples) = tiny();
        let bytes = encode_dataset(&samples, 3, Some(&cfg)).unwrap();
        assert!(decode_dataset(&bytes[..100]).is_err());
        assert!(decode_dataset(b"TSFP-DATA v2; T=1; C=1; n=0; classes=3\n{}").is_err());
        let mut ragged = samples.clone();
        ragged[1].values.pop();
        ragged[1].len -= 1;
        assert!(encode_dataset(&ragged, 3, None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = ModelConfig {
            d: 8,
            k: 2,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            patch_size: 8,
            ..Default::default()
        };
        let model = Model::new(cfg, 4).unwrap();
        let objective = ObjectiveConfig::default();
        let (manifest, blob) = encode_checkpoint(&model, &objective);
        assert_eq!(blob.len(), model.params.count() * 8);
        let json = serde_json::to_string(&manifest).unwrap();
        let back = decode_checkpoint(&serde_json::from_str(&json).unwrap(), &blob).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.objective, objective);
        assert!(decode_checkpoint(&manifest, &blob[8..]).is_err());

        let dir = std::env::temp_dir().join(format!("tsfp-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        save_checkpoint(&dir, &model, &objective).unwrap();
        assert_eq!(load_checkpoint(&dir).unwrap().model, model);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn floats_keep_every_bit() {
        for x in [0.1, -1.0 / 3.0, 1e-300, f64::MAX, 2.0f64.sqrt()] {
            assert_eq!(format_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
