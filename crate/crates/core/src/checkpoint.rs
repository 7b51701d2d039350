//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! ASKPAINT-CHECKPOINT\n
//! format_version=1\n
//! step_count=<u64>\n
//! model_config=<single-line JSON ModelConfig>\n
//! train_config=<single-line JSON, or null>\n
//! arrays=<count>\n
//! end_header\n
//! repeated <count> times:
//!     u32 name_len | name bytes (UTF-8) | u32 ndim | ndim × u32 dims | prod(dims) × f32
//! 32-byte SHA-256 of every preceding byte
//! ```
//!
//! Loading validates the digest before parsing any array, so a truncated or
//! corrupted file never yields a partially-built model.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ColorizerModel, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "ASKPAINT-CHECKPOINT";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    /// Opaque snapshot of the training configuration that produced the weights.
    pub train_config: Value,
    pub step_count: u64,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &ColorizerModel, train_config: Value, step_count: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_config: model.config().clone(),
            train_config,
            step_count,
            arrays: model
                .parameters()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuild the model described by the embedded configuration.
    pub fn to_model(&self) -> Result<ColorizerModel> {
        ColorizerModel::from_parameters(self.model_config.clone(), self.arrays.clone())
    }

    /// Rebuild against a configuration chosen by the caller; array shapes
    /// that disagree with `expected` are reported by name.
    pub fn to_model_for(&self, expected: &ModelConfig) -> Result<ColorizerModel> {
        ColorizerModel::from_parameters(expected.clone(), self.arrays.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let model_json = serde_json::to_string(&self.model_config).expect("config serializes");
        let train_json = serde_json::to_string(&self.train_config).expect("json value serializes");
        out.extend_from_slice(
            format!(
                "{MAGIC}\nformat_version={}\nstep_count={}\nmodel_config={}\ntrain_config={}\narrays={}\nend_header\n",
                self.format_version,
                self.step_count,
                model_json,
                train_json,
                self.arrays.len()
            )
            .as_bytes(),
        );
        for (name, tensor) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < DIGEST_LEN || !bytes.starts_with(MAGIC.as_bytes()) {
            return Err(corrupt("missing checkpoint magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }

        let mut reader = Reader { buf: body, pos: 0 };
        let mut header = std::collections::BTreeMap::new();
        let first = reader.line().ok_or_else(|| corrupt("empty header"))?;
        if first != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        loop {
            let line = reader.line().ok_or_else(|| corrupt("unterminated header"))?;
            if line == "end_header" {
                break;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| corrupt("malformed header line"))?;
            header.insert(key.to_string(), value.to_string());
        }
        let field = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| CheckpointError::Corrupt(format!("header field `{k}` missing")))
        };
        let format_version: u32 = field("format_version")?
            .parse()
            .map_err(|_| corrupt("bad format_version"))?;
        if format_version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: format_version,
                expected: FORMAT_VERSION,
            });
        }
        let step_count = field("step_count")?
            .parse()
            .map_err(|_| corrupt("bad step_count"))?;
        let model_config: ModelConfig = serde_json::from_str(&field("model_config")?)
            .map_err(|e| CheckpointError::Corrupt(format!("model_config: {e}")))?;
        let train_config: Value = serde_json::from_str(&field("train_config")?)
            .map_err(|e| CheckpointError::Corrupt(format!("train_config: {e}")))?;
        let count: usize = field("arrays")?.parse().map_err(|_| corrupt("bad array count"))?;

        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = reader.u32()? as usize;
            let name = String::from_utf8(reader.take(name_len)?.to_vec())
                .map_err(|_| corrupt("array name is not UTF-8"))?;
            let ndim = reader.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| reader.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let raw = reader.take(len * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::Corrupt(format!("array `{name}` has non-finite values")));
            }
            let tensor = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            arrays.push((name, tensor));
        }
        if reader.pos != body.len() {
            return Err(corrupt("trailing bytes after arrays"));
        }
        Ok(Self {
            format_version,
            model_config,
            train_config,
            step_count,
            arrays,
        })
    }

    /// Write via a temporary sibling file and rename, so readers never see a
    /// half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("ckpt.tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

pub fn save_checkpoint(model: &ColorizerModel, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, Value::Null, 0).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ColorizerModel> {
    Checkpoint::load(path)?.to_model()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Option<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n')?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).ok()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{HintImage, QuestionMap};

    fn model(k: usize) -> ColorizerModel {
        ColorizerModel::new(ModelConfig {
            height: 8,
            width: 8,
            color_channels: k,
            depth: 1,
            base_width: 4,
            seed: 11,
        })
        .unwrap()
    }

    fn probe(m: &ColorizerModel) -> Tensor<f32> {
        let k = m.config().color_channels;
        let x = Tensor::from_vec(&[1, 8, 8], (0..64).map(|v| (v as f32 * 0.1).sin()).collect()).unwrap();
        m.forward(&x, &QuestionMap::uniform(8, 8, 0.5), &HintImage::zeros(k, 8, 8), &Tensor::zeros(&[k, 8, 8]))
            .unwrap()
            .prediction
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(2);
        let ckpt = Checkpoint::from_model(&m, serde_json::json!({"lr": 0.001}), 42);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.to_bytes(), ckpt.to_bytes());
        let m2 = loaded.to_model().unwrap();
        assert_eq!(probe(&m).data(), probe(&m2).data());
    }

    #[test]
    fn truncated_and_flipped_files_rejected() {
        let bytes = Checkpoint::from_model(&model(2), Value::Null, 0).to_bytes();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Corrupt(_)), "cut {cut}: {err}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn version_mismatch_detected() {
        let mut ckpt = Checkpoint::from_model(&model(2), Value::Null, 0);
        ckpt.format_version = 7;
        let err = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap_err();
        assert!(matches!(err, CheckpointError::VersionMismatch { found: 7, expected: 1 }));
    }

    #[test]
    fn shape_mismatch_names_array() {
        let ckpt = Checkpoint::from_model(&model(2), Value::Null, 0);
        let err = ckpt.to_model_for(model(3).config()).unwrap_err();
        match err {
            Error::Checkpoint(CheckpointError::ShapeMismatch { name, found, expected }) => {
                assert_eq!(name, "enc0.conv0.weight");
                assert_eq!(found, vec![4, 6, 3, 3]);
                assert_eq!(expected, vec![4, 8, 3, 3]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn failed_load_leaves_no_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let bytes = Checkpoint::from_model(&model(2), Value::Null, 0).to_bytes();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
    }
}
