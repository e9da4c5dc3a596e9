//! Run configuration read by `promptforge train`.

use std::path::{Path, PathBuf};

use promptforge::env::EnvSpec;
use promptforge::harness::TrainConfig;
use promptforge::{LearnerConfig, PolicyConfig, TaskKind};
use serde::{Deserialize, Serialize};

/// Policy settings that do not depend on the environment. The vocabulary
/// size always comes from the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    /// Prompt length `T`; defaults to the synthetic target length, else 5,
    /// clamped into the environment's bounds.
    pub prompt_length: Option<usize>,
    pub adapter_hidden: usize,
    pub adapter_init_scale: f64,
    pub condition_on_input: bool,
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            prompt_length: None,
            adapter_hidden: p.adapter_hidden,
            adapter_init_scale: p.adapter_init_scale,
            condition_on_input: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    /// Fields given here override the defaults of the environment's task.
    #[serde(default)]
    pub train: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub policy: PolicySection,
    /// Relative paths resolve against the config file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// How many of the best validated prompts to keep in the results file.
    #[serde(default = "default_top_prompts")]
    pub top_prompts: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("promptforge-out")
}

fn default_top_prompts() -> usize {
    3
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn train_config(&self, task: &TaskKind) -> Result<TrainConfig, String> {
        let mut merged = match serde_json::to_value(TrainConfig::for_task(task)) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => unreachable!("TrainConfig serializes to an object"),
        };
        for (k, v) in &self.train {
            if !merged.contains_key(k) {
                return Err(format!("unknown train field {k:?}"));
            }
            merged.insert(k.clone(), v.clone());
        }
        serde_json::from_value(serde_json::Value::Object(merged)).map_err(|e| format!("invalid train section: {e}"))
    }

    pub fn prompt_length(&self, bounds: (usize, usize)) -> usize {
        let wanted = self.policy.prompt_length.unwrap_or(match &self.env {
            EnvSpec::Synthetic(s) => s.prompt_length,
            _ => 5,
        });
        wanted.clamp(bounds.0, bounds.1)
    }

    pub fn output_dir(&self, config_path: &Path) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            config_path.parent().unwrap_or(Path::new(".")).join(&self.output_dir)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"env": {"kind": "synthetic", "prompt_length": 3}}"#).unwrap();
        assert_eq!(c.prompt_length((1, 16)), 3);
        assert_eq!(c.top_prompts, 3);
        let t = c.train_config(&TaskKind::Direct).unwrap();
        assert_eq!(t, TrainConfig::direct());
        assert_eq!(c.output_dir(Path::new("/a/b/run.json")), PathBuf::from("/a/b/promptforge-out"));
    }

    #[test]
    fn train_section_overlays_task_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"env": {"kind": "synthetic"}, "train": {"total_steps": 7}}"#).unwrap();
        let t = c.train_config(&TaskKind::Direct).unwrap();
        assert_eq!(t.total_steps, 7);
        assert_eq!(t.prompts_per_batch, TrainConfig::direct().prompts_per_batch);
        let bad: RunConfig = serde_json::from_str(r#"{"env": {"kind": "synthetic"}, "train": {"steps": 7}}"#).unwrap();
        assert!(bad.train_config(&TaskKind::Direct).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"env": {"kind": "synthetic"}, "colour": 1}"#).is_err());
    }
}
