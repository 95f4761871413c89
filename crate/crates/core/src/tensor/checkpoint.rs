use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON document holding a model's parameters and the resolved
/// configuration that built it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_kind: String,
    pub config: BTreeMap<String, String>,
    pub parameters: Vec<CheckpointParam>,
}

impl Checkpoint {
    pub fn from_store(model_kind: &str, config: BTreeMap<String, String>, store: &ParamStore) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_kind: model_kind.to_string(),
            config,
            parameters: store
                .iter()
                .map(|p| CheckpointParam {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.to_vec(),
                })
                .collect(),
        }
    }

    /// Copies stored values into `store`, which must have exactly the same
    /// names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.parameters.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.parameters.len(),
                store.len()
            )));
        }
        for p in &self.parameters {
            let id = store
                .id_of(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", p.name)))?;
            store.set(id, Tensor::new(&p.shape, p.data.clone())?)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingCheckpoint(path.display().to_string()))?;
        Self::from_json(&text)
    }
}
