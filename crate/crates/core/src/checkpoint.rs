//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PMFCKPT\0"
//! version  u32
//! meta     u32 length + JSON (model config, flags, iteration, sampler position)
//! count    u32
//! count x  u16 name length, name, u8 dtype (4 = f32, 8 = f64),
//!          u8 rank, rank x u64 dims, payload
//! ```
//!
//! Optimiser momentum is stored alongside the parameters under the
//! `momentum/` name prefix.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AblationFlags, ModelConfig};
use crate::network::PmfNet;
use crate::nn::Parameters;
use crate::training::TrainState;

pub const MAGIC: &[u8; 8] = b"PMFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported checkpoint header: {0}")]
    Version(String),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("bad checkpoint metadata: {0}")]
    Metadata(String),
    #[error("parameter name mismatch: {0}")]
    NameMismatch(String),
    #[error("shape mismatch for {name}: model has {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub flags: AblationFlags,
    pub iteration: usize,
    /// Sampler stream position, as a decimal string.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_word_pos: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    /// Snapshot of a model's parameters, plus optimiser state if given.
    pub fn from_model(model: &PmfNet, state: Option<&TrainState>) -> Self {
        let params = model.tensors();
        let mut tensors: Vec<Tensor> = params
            .iter()
            .map(|t| Tensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: t.data.to_vec(),
            })
            .collect();
        if let Some(s) = state {
            for (t, v) in params.iter().zip(&s.velocity) {
                tensors.push(Tensor {
                    name: format!("{MOMENTUM_PREFIX}{}", t.name),
                    shape: t.shape.clone(),
                    data: v.clone(),
                });
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config().clone(),
                flags: model.flags(),
                iteration: state.map_or(0, |s| s.iteration),
                rng_word_pos: state.map(|s| s.rng_word_pos.to_string()),
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata is serialisable");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(8);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic").ok() != Some(&MAGIC[..]) {
            return Err(CheckpointError::Version(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| CheckpointError::Metadata("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1, "dtype")?[0];
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    u64::from_le_bytes(r.take(8, "dims")?.try_into().expect("8 bytes")) as usize,
                );
            }
            let n: usize = shape.iter().product();
            let data = match dtype {
                8 => r
                    .take(n.saturating_mul(8), "payload")?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                4 => r
                    .take(n.saturating_mul(4), "payload")?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                other => {
                    return Err(CheckpointError::Metadata(format!(
                        "{name}: unknown dtype {other}"
                    )))
                }
            };
            tensors.push(Tensor { name, shape, data });
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(&self.to_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Copies the parameters into a model of matching architecture.
    pub fn load_into(&self, model: &mut PmfNet) -> Result<(), CheckpointError> {
        let params: Vec<&Tensor> = self
            .tensors
            .iter()
            .filter(|t| !t.name.starts_with(MOMENTUM_PREFIX))
            .collect();
        let shapes: Vec<(String, Vec<usize>)> = model
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        check_names(&shapes, &params)?;
        for ((name, shape), dst) in shapes.iter().zip(model.tensors_mut()) {
            let src = params.iter().find(|t| &t.name == name).expect("checked");
            if &src.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: src.shape.clone(),
                });
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// Rebuilds the model described by the metadata.
    pub fn to_model(&self) -> Result<PmfNet, CheckpointError> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = PmfNet::new(&self.meta.model, self.meta.flags, &mut rng)
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Optimiser state, when the checkpoint carries momentum buffers.
    pub fn train_state(&self, model: &PmfNet) -> Result<Option<TrainState>, CheckpointError> {
        let momentum: Vec<&Tensor> = self
            .tensors
            .iter()
            .filter(|t| t.name.starts_with(MOMENTUM_PREFIX))
            .collect();
        if momentum.is_empty() {
            return Ok(None);
        }
        let mut velocity = Vec::new();
        for t in model.tensors() {
            let name = format!("{MOMENTUM_PREFIX}{}", t.name);
            let m = momentum
                .iter()
                .find(|m| m.name == name)
                .ok_or_else(|| CheckpointError::NameMismatch(format!("missing {name}")))?;
            if m.shape != t.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: t.shape.clone(),
                    found: m.shape.clone(),
                });
            }
            velocity.push(m.data.clone());
        }
        let rng_word_pos = match &self.meta.rng_word_pos {
            Some(s) => s
                .parse()
                .map_err(|_| CheckpointError::Metadata(format!("bad sampler position {s}")))?,
            None => 0,
        };
        Ok(Some(TrainState {
            iteration: self.meta.iteration,
            velocity,
            rng_word_pos,
        }))
    }
}

fn check_names(model: &[(String, Vec<usize>)], ckpt: &[&Tensor]) -> Result<(), CheckpointError> {
    if let Some((name, _)) = model
        .iter()
        .find(|(n, _)| !ckpt.iter().any(|t| &t.name == n))
    {
        return Err(CheckpointError::NameMismatch(format!(
            "checkpoint lacks {name}"
        )));
    }
    if let Some(t) = ckpt
        .iter()
        .find(|t| !model.iter().any(|(n, _)| n == &t.name))
    {
        return Err(CheckpointError::NameMismatch(format!(
            "model has no parameter {}",
            t.name
        )));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(actions: usize, flags: AblationFlags) -> PmfNet {
        let cfg = ModelConfig {
            scm_size: 8,
            feature_dim: 2,
            backbone_channels: [2, 2],
            holistic_dim: 3,
            local_dim: 3,
            attention_hidden: 2,
            fusion_hidden: 2,
            holistic_resolution: 2,
            part_resolution: 2,
            num_actions: actions,
            ..Default::default()
        };
        PmfNet::new(&cfg, flags, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let model = small(3, AblationFlags::full());
        let ck = Checkpoint::from_model(&model, None);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), model);
    }

    #[test]
    fn momentum_round_trip() {
        let model = small(3, AblationFlags::full());
        let state = TrainState {
            iteration: 7,
            velocity: model
                .tensors()
                .iter()
                .map(|t| t.data.iter().map(|v| v * 2.0).collect())
                .collect(),
            rng_word_pos: 123456789012345678901234,
        };
        let ck = Checkpoint::from_bytes(&Checkpoint::from_model(&model, Some(&state)).to_bytes())
            .unwrap();
        assert_eq!(ck.train_state(&model).unwrap(), Some(state));
        assert_eq!(ck.to_model().unwrap(), model);
    }

    #[test]
    fn header_and_truncation_errors() {
        let bytes = Checkpoint::from_model(&small(3, AblationFlags::full()), None).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::Version(_))
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(CheckpointError::Version(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn mismatched_architecture() {
        let ck = Checkpoint::from_model(&small(3, AblationFlags::full()), None);
        let mut other = small(4, AblationFlags::full());
        match ck.load_into(&mut other) {
            Err(CheckpointError::ShapeMismatch { name, .. }) => {
                assert_eq!(name, "fusion.relation.fc2.weight")
            }
            e => panic!("unexpected {e:?}"),
        }
        let mut holistic = small(3, AblationFlags::holistic_only());
        assert!(matches!(
            ck.load_into(&mut holistic),
            Err(CheckpointError::NameMismatch(_))
        ));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::from_model(&small(2, AblationFlags::full()), None);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
