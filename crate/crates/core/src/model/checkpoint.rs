//! Binary checkpoint format with a JSON sidecar for provenance.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IDCM" | version u32 | config hash [32] | tensor count u32 |
//!   per tensor: name len u32 | name utf-8 | rank u32 | dims u64 × rank | f32 × Π dims
//! | CRC-32 u32 of every byte between the magic and the CRC
//! ```
//!
//! The sidecar `<checkpoint>.json` carries the model config needed to rebuild
//! the network, plus training provenance. Wall-clock fields live only in the
//! sidecar so the binary is a pure function of the parameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ModelConfig, TrainingConfig};
use super::network::{build_model, Model};
use super::train::EpochRecord;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IDCM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint was written for a different model config (hash {found}, expected {expected})")]
    ConfigHash { expected: String, found: String },
    #[error("checkpoint holds {found} tensors, model expects {expected}")]
    TensorCount { found: usize, expected: usize },
    #[error("tensor {index}: {message}")]
    Tensor { index: usize, message: String },
    #[error("sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] super::ModelError),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Parsed, checksum-verified checkpoint body.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub tensors: Vec<StoredTensor>,
    pub crc: u32,
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let tensors = model.named_tensors();
    let mut body = Vec::new();
    body.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    body.extend_from_slice(&model.config().hash());
    body.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_body(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    // `bytes` starts right after the magic and includes the trailing CRC.
    let mut r = Reader { bytes, pos: 0 };
    let version = r.u32()?;
    let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for index in 0..count {
        let bad = |message: String| CheckpointError::Tensor { index, message };
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| bad("dimension overflows usize".into()))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("tensor size overflows".into()))?;
        let data = r.take(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        tensors.push(StoredTensor { name, tensor });
    }
    let crc = r.u32()?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(RawCheckpoint {
        version,
        config_hash,
        tensors,
        crc,
    })
}

/// Verifies magic and checksum, then parses the tensor table.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let body = &bytes[4..];
    if body.len() < 4 {
        return Err(CheckpointError::Truncated {
            offset: 4,
            needed: 4,
            available: body.len(),
        });
    }
    let (payload, stored) = body.split_at(body.len() - 4);
    let stored = u32::from_le_bytes(stored.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        // A short file also fails the checksum; report the structural cause when there is one.
        return Err(match parse_body(body) {
            Err(e @ CheckpointError::Truncated { .. }) => e,
            _ => CheckpointError::Crc { stored, computed },
        });
    }
    let raw = parse_body(body)?;
    if raw.version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: raw.version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(raw)
}

/// Rebuilds a model for `config` from checkpoint bytes.
pub fn decode_model(bytes: &[u8], config: &ModelConfig) -> Result<Model, CheckpointError> {
    let raw = parse_checkpoint(bytes)?;
    let expected_hash = config.hash();
    if raw.config_hash != expected_hash {
        return Err(CheckpointError::ConfigHash {
            expected: hex(&expected_hash),
            found: hex(&raw.config_hash),
        });
    }
    let mut model = build_model(config, 0)?;
    let mut slots = model.named_tensors_mut();
    if slots.len() != raw.tensors.len() {
        return Err(CheckpointError::TensorCount {
            found: raw.tensors.len(),
            expected: slots.len(),
        });
    }
    for (index, ((name, slot), stored)) in slots.iter_mut().zip(raw.tensors).enumerate() {
        if *name != stored.name || slot.shape() != stored.tensor.shape() {
            return Err(CheckpointError::Tensor {
                index,
                message: format!(
                    "found {} {:?}, expected {} {:?}",
                    stored.name,
                    stored.tensor.shape(),
                    name,
                    slot.shape()
                ),
            });
        }
        **slot = stored.tensor;
    }
    drop(slots);
    Ok(model)
}

/// Provenance stored next to the binary as `<checkpoint>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub config_hash: String,
    pub training_config: Option<TrainingConfig>,
    /// Zero-based epoch index of the selected weights.
    pub best_epoch: Option<usize>,
    pub best_metrics: Option<EpochRecord>,
    pub manifest_digest: Option<String>,
    pub created_unix: u64,
    /// CRC-32 of the binary file, filled in on save.
    pub crc32: u32,
    /// Defaults chosen where the reference method is silent.
    pub design_notes: Vec<String>,
}

pub fn default_design_notes() -> Vec<String> {
    [
        "batch size configurable, default 32",
        "weights He-uniform bound sqrt(6/fan_in), biases zero",
        "small_conv trains every layer; feature_file trains the head only",
        "best checkpoint = highest held-out accuracy, first occurrence",
        "final conv block pools through the global max pool only",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

impl CheckpointMeta {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_config: config.clone(),
            config_hash: hex(&config.hash()),
            training_config: None,
            best_epoch: None,
            best_metrics: None,
            manifest_digest: None,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            crc32: 0,
            design_notes: default_design_notes(),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Saves the binary and its sidecar. Returns the metadata as written.
pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<CheckpointMeta, CheckpointError> {
    let bytes = encode_model(model);
    let mut meta = meta.clone();
    meta.model_config = model.config().clone();
    meta.config_hash = hex(&model.config().hash());
    meta.crc32 = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    json.push(b'\n');
    write_atomic(&sidecar_path(path), &json)?;
    write_atomic(path, &bytes)?;
    Ok(meta)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta, CheckpointError> {
    let side = sidecar_path(path);
    let text = std::fs::read(&side).map_err(|e| io_err(&side, e))?;
    serde_json::from_slice(&text).map_err(|e| CheckpointError::Sidecar {
        path: side,
        message: e.to_string(),
    })
}

/// Loads a checkpoint, taking the model config from its sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), CheckpointError> {
    let meta = read_meta(path)?;
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let model = decode_model(&bytes, &meta.model_config)?;
    Ok((model, meta))
}

/// Loads a checkpoint that must have been written for `config`.
pub fn load_checkpoint_for(path: &Path, config: &ModelConfig) -> Result<Model, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_model(&bytes, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{Backbone, SmallConvConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            backbone: Backbone::SmallConv(SmallConvConfig {
                input_size: 10,
                channels: vec![2, 3],
                ..Default::default()
            }),
            ..Default::default()
        }
    }

    fn bits(m: &Model) -> Vec<(String, Vec<usize>, Vec<u32>)> {
        m.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = build_model(&small(), 9).unwrap();
        m.tensor_mut("head.bn.running_mean").unwrap().data_mut()[1] = -0.0;
        m.tensor_mut("head.bn.running_var").unwrap().data_mut()[0] = 1.0e-30;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.idcm");
        save_checkpoint(&m, &CheckpointMeta::new(m.config()), &path).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(meta.model_config, small());
        assert_eq!(encode_model(&back), std::fs::read(&path).unwrap());
    }

    #[test]
    fn header_layout() {
        let m = build_model(&small(), 1).unwrap();
        let b = encode_model(&m);
        assert_eq!(&b[..4], b"IDCM");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(&b[8..40], &small().hash());
        assert_eq!(u32::from_le_bytes(b[40..44].try_into().unwrap()) as usize, m.named_tensors().len());
        let name_len = u32::from_le_bytes(b[44..48].try_into().unwrap()) as usize;
        assert_eq!(&b[48..48 + name_len], b"backbone.0.conv.weight");
        let crc = u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&b[4..b.len() - 4]));
    }

    #[test]
    fn load_errors_are_distinct() {
        let cfg = small();
        let b = encode_model(&build_model(&cfg, 1).unwrap());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad, &cfg), Err(CheckpointError::BadMagic)));

        let mut v2 = b[4..b.len() - 4].to_vec();
        v2[0] = 2;
        let mut rebuilt = MAGIC.to_vec();
        rebuilt.extend_from_slice(&v2);
        rebuilt.extend_from_slice(&crc32fast::hash(&v2).to_le_bytes());
        assert!(matches!(decode_model(&rebuilt, &cfg), Err(CheckpointError::Version { found: 2, .. })));

        assert!(matches!(
            decode_model(&b[..b.len() - 100], &cfg),
            Err(CheckpointError::Truncated { .. })
        ));

        let other = ModelConfig::feature_file(3);
        assert!(matches!(decode_model(&b, &other), Err(CheckpointError::ConfigHash { .. })));

        let mut flipped = b.clone();
        let last = flipped.len() - 10;
        flipped[last] ^= 0x01;
        assert!(matches!(decode_model(&flipped, &cfg), Err(CheckpointError::Crc { .. })));
    }

    #[test]
    fn tensor_count_mismatch() {
        let cfg = small();
        let m = build_model(&cfg, 1).unwrap();
        // Rewrite the count field and drop the last tensor (head.out.bias, 2 floats).
        let b = encode_model(&m);
        let name = b"head.out.bias";
        let last_len = 4 + name.len() + 4 + 8 + 2 * 4;
        let mut body = b[4..b.len() - 4 - last_len].to_vec();
        let n = m.named_tensors().len() as u32 - 1;
        body[36..40].copy_from_slice(&n.to_le_bytes());
        let mut file = MAGIC.to_vec();
        file.extend_from_slice(&body);
        file.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        assert!(matches!(
            decode_model(&file, &cfg),
            Err(CheckpointError::TensorCount { found, expected }) if found + 1 == expected
        ));
    }
}
