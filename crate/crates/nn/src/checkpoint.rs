use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{NnError, Result, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Self-describing JSON checkpoint: a free-form `config` plus named tensors.
///
/// Floats are written in shortest round-trip form, so reading a
/// checkpoint back reproduces every weight bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| NnError::MissingTensor(name.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        if self.tensors.values().any(|t| !t.is_finite()) {
            return Err(NnError::NonFinite("checkpoint tensor"));
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NnError::CheckpointVersion {
                found: ck.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        for t in ck.tensors.values() {
            Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
