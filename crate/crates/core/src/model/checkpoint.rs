//! `VOFA1` checkpoint files: magic, u32 LE metadata length, JSON metadata,
//! then every tensor as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ParamStore, VideoToTextModel};
use crate::media::TextTokenizer;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"VOFA1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// In elements from the start of the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: ModelConfig,
    vocab: TextTokenizer,
    /// The first `n_params` entries are model parameters, the rest extras.
    n_params: usize,
    tensors: Vec<TensorEntry>,
    train: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: TextTokenizer,
    pub params: ParamStore<f32>,
    /// Optimizer moments and other named state.
    pub extra: Vec<(String, Tensor<f32>)>,
    /// Opaque training cursor (step, counters, best metric).
    pub train: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn from_model(model: &VideoToTextModel<f32>, vocab: &TextTokenizer) -> Self {
        Self {
            config: model.config.clone(),
            vocab: vocab.clone(),
            params: model.params().clone(),
            extra: Vec::new(),
            train: None,
        }
    }

    pub fn model(&self) -> Result<VideoToTextModel<f32>, ModelError> {
        VideoToTextModel::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut offset = 0;
        let all = self
            .params
            .names()
            .iter()
            .zip(self.params.tensors())
            .chain(self.extra.iter().map(|(n, t)| (n, t)));
        for (name, t) in all.clone() {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let meta = Meta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            n_params: self.params.len(),
            tensors: entries,
            train: self.train.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(9 + json.len() + 4 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in all {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let bad = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("missing VOFA1 header"));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(9..9 + len).ok_or_else(|| bad("truncated metadata"))?;
        let meta: Meta = serde_json::from_slice(json)?;
        let payload = &bytes[9 + len..];
        if !payload.len().is_multiple_of(4) {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + n > floats.len() {
                return Err(bad(&format!("tensor {} lies outside the payload", e.name)));
            }
            expected_offset += n;
            let t = Tensor::new(e.shape.clone(), floats[e.offset..e.offset + n].to_vec())
                .map_err(|err| bad(&err.to_string()))?;
            tensors.push((e.name.clone(), t));
        }
        if expected_offset != floats.len() || meta.n_params > tensors.len() {
            return Err(bad("payload length disagrees with the tensor directory"));
        }
        let extra = tensors.split_off(meta.n_params);
        let (names, values) = tensors.into_iter().unzip();
        let params = ParamStore::from_parts(names, values);
        VideoToTextModel::from_params(meta.config.clone(), params.clone())?;
        Ok(Self {
            config: meta.config,
            vocab: meta.vocab,
            params,
            extra,
            train: meta.train,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
