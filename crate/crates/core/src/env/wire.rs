//! JSON bodies of the `/v1` evaluation protocol.
//!
//! Prompts travel as token strings, never ids, since client and server
//! vocabularies need not agree.

use serde::{Deserialize, Serialize};

pub const EVALUATE_PATH: &str = "/v1/evaluate";
pub const INFO_PATH: &str = "/v1/info";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireTask {
    Classification,
    StyleTransfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub task: WireTask,
    pub template: String,
    pub prompts: Vec<Vec<String>>,
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_candidates: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub rewards: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<Vec<String>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub name: String,
    pub mask_marker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    pub deterministic_supported: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl EvaluateResponse {
    /// Checks the response against the request it answers.
    pub fn check_shape(&self, prompts: usize, inputs: usize) -> Result<(), String> {
        if self.rewards.len() != prompts {
            return Err(format!("expected {prompts} reward rows, got {}", self.rewards.len()));
        }
        if let Some(r) = self.rewards.iter().find(|r| r.len() != inputs) {
            return Err(format!("expected {inputs} reward columns, got {}", r.len()));
        }
        if self.rewards.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite reward".into());
        }
        if let Some(cp) = &self.class_probs {
            if cp.len() != prompts || cp.iter().any(|r| r.len() != inputs) {
                return Err("class_probs shape does not match rewards".into());
            }
        }
        if let Some(out) = &self.outputs {
            if out.len() != prompts || out.iter().any(|r| r.len() != inputs) {
                return Err("outputs shape does not match rewards".into());
            }
        }
        Ok(())
    }
}
