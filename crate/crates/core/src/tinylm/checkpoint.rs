use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ModelDims, TinyModel, Vocab, Weights};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk form of a [`TinyModel`]. Floats round-trip exactly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub vocab: Vec<String>,
    pub dims: ModelDims,
    pub weights: Weights,
}

impl Checkpoint {
    pub fn from_model(model: &TinyModel) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            vocab: model.vocab.tokens().to_vec(),
            dims: model.dims,
            weights: model.weights.clone(),
        }
    }

    pub fn into_model(self) -> Result<TinyModel> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        let ModelDims { d, hidden, max_len } = self.dims;
        if d == 0 || hidden == 0 || max_len == 0 {
            return Err(Error::Checkpoint("zero model dimension".into()));
        }
        let v = self.vocab.len();
        let expected = Weights::zeros(v, self.dims);
        let names = ["emb", "pos", "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"];
        for ((name, got), want) in names
            .iter()
            .zip(self.weights.tensors())
            .zip(expected.tensors())
        {
            if got.len() != want.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has {} values, expected {}",
                    got.len(),
                    want.len()
                )));
            }
        }
        if !self.weights.all_finite() {
            return Err(Error::Checkpoint("non-finite weight".into()));
        }
        let vocab = Vocab::from_list(self.vocab);
        if vocab.eos_id() != Some(0) {
            return Err(Error::Checkpoint("vocabulary must start with <eos>".into()));
        }
        if vocab.tokens().len() != v {
            return Err(Error::Checkpoint("duplicate vocabulary entry".into()));
        }
        Ok(TinyModel {
            vocab,
            dims: self.dims,
            weights: self.weights,
        })
    }
}

pub fn save_checkpoint(model: &TinyModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_model(model))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TinyModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ckpt.into_model()
}
