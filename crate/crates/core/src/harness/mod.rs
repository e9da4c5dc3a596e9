//! Training orchestration: sample prompts, score them, stabilize rewards,
//! update the learner, validate.

mod baseline;
mod metrics;
mod results;
mod selection;
mod transfer;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{bootstrap_evaluate, Environment, Evaluation, TaskKind};
use crate::error::{Error, Result};
use crate::learner::{LearnerState, Trajectory};
use crate::policy::{greedy_prompt, sample_prompt_with, ActionMask, ConditioningContext, Policy, SamplingConfig};
use crate::rewards::{ClassificationReward, RewardBatch, ShapingMap};
use crate::text::{Example, Prompt, TokenId};

pub use baseline::{random_search, RandomSearchResult};
pub use metrics::{accuracy, balanced_accuracy, joint_score, unit_fluency};
pub use results::{ResultsFile, TopPrompt};
pub use selection::select_top_prompts;
pub use transfer::{transfer_matrix, Cell, TransferMatrix, TransferMetric};

pub use crate::env::TaskData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    /// Greedy-prediction accuracy (classification only).
    Accuracy,
    /// Mean per-class recall (classification only).
    BalancedAccuracy,
    /// Mean task reward before z-scoring.
    MeanReward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Prompts per step (classification) or per input (other tasks).
    pub prompts_per_batch: usize,
    /// Inputs per step; ignored for classification, where every prompt is
    /// scored on the whole training set.
    pub inputs_per_batch: usize,
    pub validate_every: u64,
    /// Clamped to the vocabulary size.
    pub top_k: Option<usize>,
    pub logit_bias: f64,
    /// Environment calls averaged per evaluation (stochastic envs only).
    pub bootstrap: usize,
    pub classification_reward: ClassificationReward,
    /// Applied to style-transfer rewards.
    pub shaping: ShapingMap,
    /// Multiplier for rewards of direct tasks.
    pub direct_scale: f64,
    pub zscore: bool,
    pub validation_metric: ValidationMetric,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::classification()
    }
}

impl TrainConfig {
    pub fn classification() -> Self {
        Self {
            total_steps: 1000,
            prompts_per_batch: 16,
            inputs_per_batch: 2,
            validate_every: 10,
            top_k: Some(256),
            logit_bias: 0.0,
            bootstrap: 1,
            classification_reward: ClassificationReward::default(),
            shaping: ShapingMap::style_transfer(),
            direct_scale: 1.0,
            zscore: true,
            validation_metric: ValidationMetric::Accuracy,
            seed: 0,
        }
    }

    pub fn style_transfer() -> Self {
        Self {
            prompts_per_batch: 4,
            inputs_per_batch: 2,
            validate_every: 50,
            top_k: Some(50),
            bootstrap: 4,
            validation_metric: ValidationMetric::MeanReward,
            ..Self::classification()
        }
    }

    pub fn direct() -> Self {
        Self {
            prompts_per_batch: 4,
            inputs_per_batch: 3,
            validate_every: 50,
            top_k: None,
            validation_metric: ValidationMetric::MeanReward,
            ..Self::classification()
        }
    }

    /// Defaults for the given task.
    pub fn for_task(task: &TaskKind) -> Self {
        match task {
            TaskKind::Classification { .. } => Self::classification(),
            TaskKind::StyleTransfer { .. } => Self::style_transfer(),
            TaskKind::Direct => Self::direct(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts_per_batch == 0 || self.inputs_per_batch == 0 || self.validate_every == 0 || self.bootstrap == 0 {
            return Err(Error::InvalidConfig("batch sizes, validate_every and bootstrap must be positive".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::InvalidConfig("top_k must be positive".into()));
        }
        if !self.logit_bias.is_finite() || !self.direct_scale.is_finite() {
            return Err(Error::InvalidConfig("logit_bias and direct_scale must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub prompt_text: String,
    pub prompt_ids: Vec<TokenId>,
    pub metric: f64,
    /// Configured task reward for classifiers; the environment's own reward,
    /// before shaping or scaling, otherwise.
    pub mean_reward: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    /// Mean raw environment reward over the batch.
    pub mean_reward: f64,
    /// Mean task reward after scaling or shaping, before z-scoring.
    pub train_reward: f64,
    /// Highest-reward prompt sampled at this step.
    pub best_prompt_text: String,
    pub prompt_ids: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn validations(&self) -> impl Iterator<Item = (u64, &ValidationRecord)> {
        self.records.iter().filter_map(|r| r.validation.as_ref().map(|v| (r.step, v)))
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub learner: LearnerState,
    pub log: TrainLog,
    /// Greedy prompt from the placeholder context after training.
    pub final_prompt: Prompt,
    pub final_validation: ValidationRecord,
    /// `(prompt, example)` reward queries, bootstrap repeats included.
    pub evaluations: usize,
}

/// Everything one run needs besides the learner.
pub struct TrainSetup<'a> {
    pub env: &'a dyn Environment,
    pub data: &'a TaskData,
    pub config: &'a TrainConfig,
    pub action_mask: Option<Arc<dyn ActionMask>>,
}

/// Runs `config.total_steps` updates and returns the trained learner and
/// its log.
pub fn train(
    env: &dyn Environment,
    learner: LearnerState,
    data: &TaskData,
    config: &TrainConfig,
    action_mask: Option<Arc<dyn ActionMask>>,
) -> Result<TrainOutcome> {
    let setup = TrainSetup {
        env,
        data,
        config,
        action_mask,
    };
    train_with(&setup, learner, |_| Ok(()))
}

/// [`train`] with a callback invoked on every log record as it is produced.
pub fn train_with<F>(setup: &TrainSetup<'_>, mut learner: LearnerState, mut on_record: F) -> Result<TrainOutcome>
where
    F: FnMut(&LogRecord) -> Result<()>,
{
    let TrainSetup {
        env,
        data,
        config,
        ..
    } = *setup;
    config.validate()?;
    check_compatible(env, &learner.online)?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::InvalidConfig("training and validation sets must be non-empty".into()));
    }
    let vocab_size = learner.online.vocab_size();
    let sampling = SamplingConfig {
        top_k: config.top_k.map(|k| k.min(vocab_size)),
        logit_bias: config.logit_bias,
        temperature: learner.temperature(),
        action_mask: setup.action_mask.clone(),
    };
    sampling.validate(vocab_size)?;
    let mut run = Run {
        env,
        data,
        config,
        sampling,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        evaluations: 0,
    };
    let mut log = TrainLog::default();
    while learner.step_count() < config.total_steps {
        let batch = run.batch(&learner.online)?;
        let out = crate::learner::sql_loss(&batch.trajectories, &learner)?;
        let step_no = learner.step_count();
        if !out.loss.is_finite() || out.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: step_no,
                diagnostic: batch.diagnostic(out.loss),
            });
        }
        crate::learner::step(&mut learner, &out.gradient)?;
        let step_no = learner.step_count();
        let validation = if step_no % config.validate_every == 0 || step_no == config.total_steps {
            Some(run.validate(&learner.online, setup.action_mask.as_deref())?)
        } else {
            None
        };
        let record = LogRecord {
            step: step_no,
            loss: out.loss,
            mean_reward: batch.mean_raw,
            train_reward: batch.mean_shaped,
            best_prompt_text: batch.best.text().to_string(),
            prompt_ids: batch.best.ids().to_vec(),
            validation,
        };
        log::debug!("step {step_no}: loss {:.4} reward {:.4}", record.loss, record.mean_reward);
        on_record(&record)?;
        log.records.push(record);
    }
    let final_validation = run.validate(&learner.online, setup.action_mask.as_deref())?;
    let final_prompt = Prompt::new(final_validation.prompt_ids.clone(), env.vocab())?;
    Ok(TrainOutcome {
        learner,
        log,
        final_prompt,
        final_validation,
        evaluations: run.evaluations,
    })
}

fn check_compatible(env: &dyn Environment, policy: &Policy) -> Result<()> {
    if env.vocab().len() != policy.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "policy vocabulary has {} tokens, {} has {}",
            policy.vocab_size(),
            env.name(),
            env.vocab().len()
        )));
    }
    let (lo, hi) = env.prompt_length_bounds();
    let t = policy.prompt_length();
    if t < lo || t > hi {
        return Err(Error::InvalidConfig(format!("prompt length {t} outside [{lo}, {hi}] for {}", env.name())));
    }
    Ok(())
}

struct Batch {
    trajectories: Vec<Trajectory>,
    mean_raw: f64,
    mean_shaped: f64,
    best: Prompt,
    stabilized: Vec<f64>,
}

impl Batch {
    fn diagnostic(&self, loss: f64) -> String {
        let max_q = self
            .trajectories
            .iter()
            .flat_map(|t| t.q_values.iter().flatten())
            .fold(0.0f64, |m, q| m.max(q.abs()));
        let bad_rewards = self.stabilized.iter().filter(|r| !r.is_finite()).count();
        format!(
            "loss={loss}, mean_raw_reward={}, non_finite_rewards={bad_rewards}, max_abs_q={max_q}",
            self.mean_raw
        )
    }
}

struct Run<'a> {
    env: &'a dyn Environment,
    data: &'a TaskData,
    config: &'a TrainConfig,
    sampling: SamplingConfig,
    rng: ChaCha8Rng,
    evaluations: usize,
}

impl Run<'_> {
    fn context(&self, policy: &Policy, example: &Example) -> Result<ConditioningContext> {
        if !policy.config().condition_on_input {
            return Ok(policy.placeholder_context());
        }
        let ids = self.env.vocab().encode(&example.input_text).map_err(|e| {
            Error::InvalidConfig(format!("input conditioning needs inputs in the prompt vocabulary: {e}"))
        })?;
        policy.input_context(&ids)
    }

    fn evaluate(&mut self, prompts: &[Prompt], examples: &[Example], seed: u64) -> Result<Evaluation> {
        let n = if self.env.is_deterministic() { 1 } else { self.config.bootstrap };
        self.evaluations += prompts.len() * examples.len() * n;
        bootstrap_evaluate(self.env, prompts, examples, n, seed)
    }

    /// Task reward of each cell of `eval`, before z-scoring.
    fn task_rewards(&self, eval: &Evaluation, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        let rows = eval.rewards.rows();
        match self.env.task() {
            TaskKind::Classification { .. } => {
                let probs = eval
                    .class_probs
                    .as_ref()
                    .ok_or_else(|| Error::SchemaError("classifier returned no class probabilities".into()))?;
                Ok((0..rows)
                    .map(|i| {
                        examples
                            .iter()
                            .enumerate()
                            .map(|(j, ex)| self.config.classification_reward.reward(&probs[i][j], ex.label.expect("validated")))
                            .collect()
                    })
                    .collect())
            }
            TaskKind::StyleTransfer { .. } => Ok(eval
                .rewards
                .to_rows()
                .into_iter()
                .map(|r| r.into_iter().map(|v| self.config.shaping.apply(v)).collect())
                .collect()),
            TaskKind::Direct => Ok(eval
                .rewards
                .to_rows()
                .into_iter()
                .map(|r| r.into_iter().map(|v| self.config.direct_scale * v).collect())
                .collect()),
        }
    }

    fn batch(&mut self, policy: &Policy) -> Result<Batch> {
        let classification = self.env.task().is_classification();
        let inputs: Vec<usize> = if classification {
            vec![0]
        } else {
            let mut idx: Vec<usize> = (0..self.data.train.len()).collect();
            idx.shuffle(&mut self.rng);
            idx.truncate(self.config.inputs_per_batch);
            idx
        };
        let vocab = self.env.vocab().clone();
        let mut cells = Vec::new();
        let mut trajectories = Vec::new();
        let mut prompts_all = Vec::new();
        let (mut raw_sum, mut raw_n) = (0.0, 0usize);
        for (group, &input) in inputs.iter().enumerate() {
            let ctx = if classification {
                policy.placeholder_context()
            } else {
                self.context(policy, &self.data.train[input])?
            };
            let mut prompts = Vec::with_capacity(self.config.prompts_per_batch);
            for _ in 0..self.config.prompts_per_batch {
                let s = sample_prompt_with(policy, &ctx, &self.sampling, &mut self.rng)?;
                prompts.push(s.prompt(&vocab)?);
                trajectories.push(Trajectory {
                    ctx: ctx.clone(),
                    ids: s.ids,
                    q_values: s.q_values,
                    terminal_reward: 0.0,
                });
            }
            let examples: &[Example] = if classification {
                &self.data.train
            } else {
                std::slice::from_ref(&self.data.train[input])
            };
            let seed = self.rng.random::<u64>();
            let eval = self.evaluate(&prompts, examples, seed)?;
            raw_sum += eval.rewards.mean() * (eval.rewards.rows() * eval.rewards.cols()) as f64;
            raw_n += eval.rewards.rows() * eval.rewards.cols();
            let task = self.task_rewards(&eval, examples)?;
            for (p, row) in task.iter().enumerate() {
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                cells.push((group, p, mean));
            }
            prompts_all.extend(prompts);
        }
        let stabilized = RewardBatch::stabilize(&cells, |r| r, self.config.zscore);
        debug_assert!(preserves_group_argmax(&stabilized));
        let rewards = stabilized.stabilized();
        for (traj, r) in trajectories.iter_mut().zip(&rewards) {
            traj.terminal_reward = *r;
        }
        let mut best = 0;
        for (i, c) in cells.iter().enumerate() {
            if c.2 > cells[best].2 {
                best = i;
            }
        }
        let mean_shaped = cells.iter().map(|c| c.2).sum::<f64>() / cells.len() as f64;
        Ok(Batch {
            trajectories,
            mean_raw: raw_sum / raw_n.max(1) as f64,
            mean_shaped,
            best: prompts_all.swap_remove(best),
            stabilized: rewards,
        })
    }

    /// Scores the greedy prompt on the validation split.
    fn validate(&mut self, policy: &Policy, mask: Option<&dyn ActionMask>) -> Result<ValidationRecord> {
        let vocab = self.env.vocab().clone();
        let placeholder = greedy_prompt(policy, &policy.placeholder_context(), mask)?;
        let prompt = Prompt::new(placeholder, &vocab)?;
        let seed = self.rng.random::<u64>();
        let task = self.env.task();
        let validation = self.data.validation.clone();
        if let TaskKind::Classification { num_classes, .. } = task {
            let eval = self.evaluate(std::slice::from_ref(&prompt), &validation, seed)?;
            let probs = &eval.class_probs.as_ref().ok_or_else(|| Error::SchemaError("no class probabilities".into()))?[0];
            let labels: Vec<usize> = validation.iter().map(|e| e.label.expect("validated")).collect();
            let preds: Vec<usize> = probs.iter().map(|p| crate::nn::argmax(p)).collect();
            let task_rewards = self.task_rewards(&eval, &validation)?;
            let mean_reward = task_rewards[0].iter().sum::<f64>() / validation.len() as f64;
            let metric = match self.config.validation_metric {
                ValidationMetric::Accuracy => accuracy(&preds, &labels),
                ValidationMetric::BalancedAccuracy => balanced_accuracy(&preds, &labels, num_classes),
                ValidationMetric::MeanReward => mean_reward,
            };
            return Ok(ValidationRecord {
                prompt_text: prompt.text().to_string(),
                prompt_ids: prompt.ids().to_vec(),
                metric,
                mean_reward,
            });
        }
        let mut total = 0.0;
        if policy.config().condition_on_input {
            for ex in &validation {
                let ctx = self.context(policy, ex)?;
                let p = Prompt::new(greedy_prompt(policy, &ctx, mask)?, &vocab)?;
                let eval = self.evaluate(std::slice::from_ref(&p), std::slice::from_ref(ex), seed)?;
                total += eval.rewards.get(0, 0);
            }
        } else {
            let eval = self.evaluate(std::slice::from_ref(&prompt), &validation, seed)?;
            total = eval.rewards.row(0).iter().sum();
        }
        let mean_reward = total / validation.len() as f64;
        Ok(ValidationRecord {
            prompt_text: prompt.text().to_string(),
            prompt_ids: prompt.ids().to_vec(),
            metric: mean_reward,
            mean_reward,
        })
    }
}

/// z-scoring is monotone within a group, so the best prompt of each input
/// stays the best.
fn preserves_group_argmax(batch: &RewardBatch) -> bool {
    let mut groups: Vec<usize> = batch.entries.iter().map(|e| e.input).collect();
    groups.dedup();
    groups.iter().all(|&g| {
        let entries: Vec<_> = batch.entries.iter().filter(|e| e.input == g).collect();
        let arg = |f: fn(&crate::rewards::RewardEntry) -> f64| {
            let mut best = 0;
            for (i, e) in entries.iter().enumerate() {
                if f(e) > f(entries[best]) {
                    best = i;
                }
            }
            best
        };
        let (a, b) = (arg(|e| e.shaped), arg(|e| e.stabilized));
        a == b || entries[a].stabilized == entries[b].stabilized
    })
}
