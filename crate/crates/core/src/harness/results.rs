use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::TransferMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPrompt {
    pub text: String,
    pub metric: f64,
}

/// Summary written at the end of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub top_prompts: Vec<TopPrompt>,
    pub final_greedy_prompt: String,
    pub final_greedy_reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_matrix: Option<TransferMatrix>,
    /// Seconds since the Unix epoch.
    pub finished_at: u64,
}

impl ResultsFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
