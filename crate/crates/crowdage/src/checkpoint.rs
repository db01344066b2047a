//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (configs, trainer position, tensor table), the tensors as
//! little-endian `f32`, and a trailing CRC-32 of everything before it.

use std::fs;
use std::path::Path;

use crowdage_core::model::{Model, ModelConfig};
use crowdage_core::nn::{AdamState, ParamGroup, ParamStore};
use crowdage_core::pipeline::{RngState, TrainConfig, TrainerState};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"CRWDAGE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train_config: Option<TrainConfig>,
    pub trainer: Option<TrainerState>,
    /// `(width, height)` of the scenes the model was trained on.
    pub scene_size: Option<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    scene_size: Option<(usize, usize)>,
    trainer: Option<TrainerMeta>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerMeta {
    epoch: usize,
    step: u64,
    rng: RngState,
    adam_step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Self {
            model,
            train_config: None,
            trainer: None,
            scene_size: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let header = Header {
            model: self.model.config.clone(),
            train: self.train_config.clone(),
            scene_size: self.scene_size,
            trainer: self.trainer.as_ref().map(|t| TrainerMeta {
                epoch: t.epoch,
                step: t.step,
                rng: t.rng,
                adam_step: t.adam.step,
            }),
            tensors: store
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in store.iter() {
            push_f32s(&mut out, &p.data);
        }
        if let Some(t) = &self.trainer {
            for m in t.adam.m.iter().chain(&t.adam.v) {
                push_f32s(&mut out, m);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 24 || bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(fail("checksum mismatch, file is corrupted".into()));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| fail("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&body[20..hend])
            .map_err(|e| fail(format!("bad header: {e}")))?;
        let mut floats = body[hend..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        if (body.len() - hend) % 4 != 0 {
            return Err(fail("tensor data is not a whole number of floats".into()));
        }
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let v: Vec<f32> = floats.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(fail("tensor data is truncated".into()))
            }
        };
        let mut store = ParamStore::new();
        for t in &header.tensors {
            let n = t.shape.iter().product();
            store.add(t.name.clone(), t.group, t.shape.clone(), take(n)?);
        }
        let trainer = match header.trainer {
            Some(meta) => {
                let sizes: Vec<usize> = store.iter().map(|p| p.data.len()).collect();
                let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                Some(TrainerState {
                    epoch: meta.epoch,
                    step: meta.step,
                    rng: meta.rng,
                    adam: AdamState {
                        step: meta.adam_step,
                        m,
                        v,
                    },
                })
            }
            None => None,
        };
        if floats.next().is_some() {
            return Err(fail("trailing tensor data".into()));
        }
        let model = Model::from_store(&header.model, store).map_err(|e| fail(e.to_string()))?;
        Ok(Self {
            model,
            train_config: header.train,
            trainer,
            scene_size: header.scene_size,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}
