//! Checkpoint archives.
//!
//! One safetensors file per checkpoint. Weights are stored as f32 tensors; a
//! single JSON header entry carries the stage tag, the format version, the
//! config snapshot, upstream digests and a SHA-256 of the weight payload.
//! Equal checkpoints serialize to equal bytes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{digest_tensors, TensorData};

pub const FORMAT_VERSION: u32 = 1;

/// The one metadata key; safetensors writes its metadata map in hash order,
/// so everything lives under a single key to keep archives byte-stable.
const HEADER_KEY: &str = "stylenerf";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stage: Stage,
    config: serde_json::Value,
    digests: BTreeMap<String, String>,
    payload_sha256: String,
}

/// Digest keys used in [`ModelCheckpoint::digests`].
pub const ENCODER_DIGEST: &str = "encoder";
pub const TRUNK_DIGEST: &str = "trunk";
pub const REGISTRY_DIGEST: &str = "registry";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Adain,
    Nerf,
    Multistyle,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Adain => "adain",
            Stage::Nerf => "nerf",
            Stage::Multistyle => "multistyle",
        })
    }
}

impl FromStr for Stage {
    type Err = CheckpointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adain" => Ok(Stage::Adain),
            "nerf" => Ok(Stage::Nerf),
            "multistyle" => Ok(Stage::Multistyle),
            other => Err(CheckpointError::Corrupt(format!("unknown stage tag {other:?}"))),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{what} digest mismatch: checkpoint records {expected}, found {found}")]
    Digest {
        what: String,
        expected: String,
        found: String,
    },
    #[error("corrupt checkpoint archive: {0}")]
    Corrupt(String),
    #[error("checkpoint holds a {found} model where a {expected} model was expected")]
    StageTag { expected: Stage, found: Stage },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub stage: Stage,
    pub format_version: u32,
    pub config: serde_json::Value,
    /// Upstream digests (encoder / trunk / registry as applicable).
    pub digests: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, TensorData>,
}

impl ModelCheckpoint {
    pub fn new(stage: Stage, config: serde_json::Value, tensors: BTreeMap<String, TensorData>) -> Self {
        Self {
            stage,
            format_version: FORMAT_VERSION,
            config,
            digests: BTreeMap::new(),
            tensors,
        }
    }

    pub fn with_digest(mut self, key: &str, value: impl Into<String>) -> Self {
        self.digests.insert(key.to_string(), value.into());
        self
    }

    pub fn weights_digest(&self) -> String {
        digest_tensors(&self.tensors)
    }

    /// Tensors whose names start with `prefix`, prefix kept.
    pub fn tensors_with_prefix(&self, prefix: &str) -> BTreeMap<String, TensorData> {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn expect_stage(&self, expected: Stage) -> Result<(), CheckpointError> {
        if self.stage != expected {
            return Err(CheckpointError::StageTag {
                expected,
                found: self.stage,
            });
        }
        Ok(())
    }

    /// Errors with [`CheckpointError::Digest`] unless the recorded digest under `key` equals `actual`.
    pub fn verify_digest(&self, key: &str, actual: &str) -> Result<(), CheckpointError> {
        match self.digests.get(key) {
            Some(recorded) if recorded == actual => Ok(()),
            Some(recorded) => Err(CheckpointError::Digest {
                what: key.to_string(),
                expected: recorded.clone(),
                found: actual.to_string(),
            }),
            None => Err(CheckpointError::Corrupt(format!("checkpoint does not record a {key} digest"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: BTreeMap<&str, Vec<u8>> = self
            .tensors
            .iter()
            .map(|(k, t)| (k.as_str(), t.data.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = self
            .tensors
            .iter()
            .map(|(k, t)| {
                TensorView::new(Dtype::F32, t.shape.clone(), &bytes[k.as_str()])
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| CheckpointError::Corrupt(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let header = Header {
            format_version: self.format_version,
            stage: self.stage,
            config: self.config.clone(),
            digests: self.digests.clone(),
            payload_sha256: self.weights_digest(),
        };
        let meta = HashMap::from([(
            HEADER_KEY.to_string(),
            serde_json::to_string(&header).expect("header serializes"),
        )]);
        Ok(safetensors::tensor::serialize(views, Some(meta)).map_err(|e| CheckpointError::Corrupt(e.to_string()))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |e: &dyn fmt::Display| CheckpointError::Corrupt(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| corrupt(&e))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| CheckpointError::Corrupt("missing header metadata".into()))?;
        let raw: serde_json::Value = meta
            .get(HEADER_KEY)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing {HEADER_KEY} header")))
            .and_then(|text| serde_json::from_str(text).map_err(|e| corrupt(&e)))?;
        let format_version = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| CheckpointError::Corrupt("header has no format_version".into()))?;
        if format_version != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::Version {
                found: u32::try_from(format_version).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let Header {
            format_version,
            stage,
            config,
            digests,
            payload_sha256: payload_digest,
        } = serde_json::from_value(raw).map_err(|e| corrupt(&e))?;

        let archive = SafeTensors::deserialize(bytes).map_err(|e| corrupt(&e))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in archive.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(CheckpointError::Corrupt(format!("tensor {name} is not f32")));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(
                name,
                TensorData {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        let ckpt = Self {
            stage,
            format_version,
            config,
            digests,
            tensors,
        };
        let found = ckpt.weights_digest();
        if found != payload_digest {
            return Err(CheckpointError::Digest {
                what: "weights payload".into(),
                expected: payload_digest,
                found,
            });
        }
        Ok(ckpt)
    }
}

/// Writes `bytes` to `path` atomically (sibling temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("{} is not a file path", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

/// Loads and verifies a checkpoint; with `expected` set, the stage tag must match.
pub fn load_checkpoint(path: &Path, expected: Option<Stage>) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = ModelCheckpoint::from_bytes(&bytes)?;
    if let Some(stage) = expected {
        ckpt.expect_stage(stage)?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelCheckpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.weight".to_string(),
            TensorData {
                shape: vec![2, 3],
                data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-8, -7.25, 1e30],
            },
        );
        tensors.insert(
            "b".to_string(),
            TensorData {
                shape: vec![1],
                data: vec![0.1],
            },
        );
        ModelCheckpoint::new(Stage::Nerf, serde_json::json!({"steps": 3, "lr": 5e-4}), tensors)
            .with_digest(TRUNK_DIGEST, "abc")
    }

    #[test]
    fn save_load_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let ckpt = sample();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path, Some(Stage::Nerf)).unwrap();
        assert_eq!(back, ckpt);
        for (k, t) in &ckpt.tensors {
            let bits: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            let back_bits: Vec<u32> = back.tensors[k].data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, back_bits);
        }
        // no temp files left behind
        let leftovers: Vec<_> = std::fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn truncated_archive_is_corrupt() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 7, bytes.len() / 2, bytes.len() - 1] {
            let err = ModelCheckpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Corrupt(_)), "cut {cut}: {err:?}");
        }
    }

    #[test]
    fn flipped_payload_bit_is_digest_error() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes).unwrap_err(),
            CheckpointError::Digest { .. }
        ));
    }

    #[test]
    fn wrong_stage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample(), &path).unwrap();
        let err = load_checkpoint(&path, Some(Stage::Multistyle)).unwrap_err();
        assert!(matches!(
            err,
            Error::Checkpoint(CheckpointError::StageTag {
                expected: Stage::Multistyle,
                found: Stage::Nerf
            })
        ));
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let mut ckpt = sample();
        for key in ["a", "b", "c", "d", "e", "f"] {
            ckpt = ckpt.with_digest(key, key.repeat(3));
        }
        let bytes = ckpt.to_bytes().unwrap();
        for _ in 0..8 {
            let again = ModelCheckpoint::from_bytes(&bytes).unwrap();
            assert_eq!(again, ckpt);
            assert_eq!(again.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let mut ckpt = sample();
        ckpt.format_version = FORMAT_VERSION + 1;
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(
            ModelCheckpoint::from_bytes(&bytes).unwrap_err(),
            CheckpointError::Version {
                found: FORMAT_VERSION + 1,
                expected: FORMAT_VERSION
            }
        );
    }

    #[test]
    fn digest_verification() {
        let ckpt = sample();
        assert!(ckpt.verify_digest(TRUNK_DIGEST, "abc").is_ok());
        assert!(matches!(ckpt.verify_digest(TRUNK_DIGEST, "abd"), Err(CheckpointError::Digest { .. })));
    }
}
