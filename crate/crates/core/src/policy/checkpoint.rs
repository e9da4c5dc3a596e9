//! Checkpoints store the seed, the config and the adapter. Frozen weights are
//! rebuilt from the seed on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Adapter, Policy, PolicyConfig};

const FORMAT: &str = "promptforge-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: PolicyConfig,
    pub adapter: Vec<f64>,
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            seed: policy.config().seed,
            config: policy.config().clone(),
            adapter: policy.adapter().params().to_vec(),
        }
    }

    /// Rebuilds the policy; `expected` must equal the stored config.
    pub fn restore(&self, expected: &PolicyConfig) -> Result<Policy> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        if &self.config != expected {
            return Err(Error::CheckpointMismatch(format!(
                "stored {:?}, expected {:?}",
                self.config, expected
            )));
        }
        if self.seed != self.config.seed {
            return Err(Error::CheckpointMismatch("seed disagrees with config".into()));
        }
        self.restore_stored()
    }

    /// Rebuilds the policy from the stored config without comparing.
    pub fn restore_stored(&self) -> Result<Policy> {
        let mut policy = Policy::new(self.config.clone())?;
        let adapter = Adapter::from_params(
            self.config.model_dim,
            self.config.adapter_hidden,
            self.adapter.clone(),
        )
        .ok_or_else(|| Error::CheckpointMismatch("adapter parameter count".into()))?;
        policy.set_adapter(adapter)?;
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
