//! Black-box reward environments.
//!
//! An environment maps `(prompts, examples, seed)` to a reward matrix with one
//! row per prompt and one column per example. Classifier environments also
//! report class probabilities so the optimizer can apply its own reward.

mod classifier;
mod remote;
mod spec;
mod stub;
mod synthetic;
mod tst;
pub mod wire;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{Example, Prompt, Vocabulary};

pub use classifier::{TinyClassifierConfig, TinyClassifierEnv};
pub use remote::{RemoteConfig, RemoteEnv, RemoteTask};
pub use spec::{BuiltEnv, EnvSpec, RemoteSpec, SyntheticSpec, TaskData, TinyClassifierSpec, TstSimSpec};
pub use stub::{Handler, StubBackend, StubServer};
pub use synthetic::SyntheticOracleEnv;
pub use tst::{Candidate, TstSimConfig, TstSimEnv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { num_classes: usize, mask_marker: String },
    StyleTransfer { num_candidates: usize },
    /// The environment's reward is the task reward (synthetic oracles).
    Direct,
}

impl TaskKind {
    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

/// Rows are prompts, columns are examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RewardMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, cols: usize) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * cols);
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!("row {i} has {} cells, expected {cols}", r.len())));
            }
            data.extend(r);
        }
        Ok(Self { rows: n, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn row_mean(&self, r: usize) -> f64 {
        let row = self.row(r);
        row.iter().sum::<f64>() / row.len().max(1) as f64
    }
}

/// Result of one evaluate call.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rewards: RewardMatrix,
    /// `[prompt][example][class]`, for classifiers.
    pub class_probs: Option<Vec<Vec<Vec<f64>>>>,
    /// `[prompt][example]` selected output text, for generators.
    pub outputs: Option<Vec<Vec<String>>>,
}

pub trait Environment: Send + Sync {
    fn name(&self) -> &str;

    fn vocab(&self) -> &Vocabulary;

    fn task(&self) -> TaskKind;

    /// Inclusive bounds on prompt length.
    fn prompt_length_bounds(&self) -> (usize, usize);

    fn is_deterministic(&self) -> bool;

    fn evaluate(&self, prompts: &[Prompt], examples: &[Example], seed: u64) -> Result<Evaluation>;

    fn class_probabilities(&self, _prompt: &Prompt, _example: &Example) -> Result<Vec<f64>> {
        Err(Error::NotAClassifier)
    }
}

/// Free-function form of [`Environment::evaluate`].
pub fn evaluate(env: &dyn Environment, prompts: &[Prompt], examples: &[Example], seed: u64) -> Result<RewardMatrix> {
    Ok(env.evaluate(prompts, examples, seed)?.rewards)
}

pub fn class_probabilities(env: &dyn Environment, prompt: &Prompt, example: &Example) -> Result<Vec<f64>> {
    env.class_probabilities(prompt, example)
}

/// Mean of `n` evaluate calls with seeds `seed, seed + 1, …, seed + n − 1`.
pub fn bootstrap_evaluate(
    env: &dyn Environment,
    prompts: &[Prompt],
    examples: &[Example],
    n: usize,
    seed: u64,
) -> Result<Evaluation> {
    let n = n.max(1);
    let first = env.evaluate(prompts, examples, seed)?;
    if n == 1 || env.is_deterministic() {
        return Ok(first);
    }
    let mut acc = first.rewards.clone();
    for i in 1..n {
        let more = env.evaluate(prompts, examples, seed.wrapping_add(i as u64))?;
        for (a, b) in acc.data.iter_mut().zip(&more.rewards.data) {
            *a += b;
        }
    }
    for a in acc.data.iter_mut() {
        *a /= n as f64;
    }
    Ok(Evaluation { rewards: acc, ..first })
}

pub fn bootstrap_reward(env: &dyn Environment, prompt: &Prompt, example: &Example, n: usize, seed: u64) -> Result<f64> {
    let eval = bootstrap_evaluate(env, std::slice::from_ref(prompt), std::slice::from_ref(example), n, seed)?;
    Ok(eval.rewards.get(0, 0))
}

/// Checks prompt lengths, prompt ids and example annotations against `env`.
pub fn validate_request(env: &dyn Environment, prompts: &[Prompt], examples: &[Example]) -> Result<()> {
    let (lo, hi) = env.prompt_length_bounds();
    for p in prompts {
        if p.len() < lo || p.len() > hi {
            return Err(Error::ShapeMismatch(format!(
                "prompt length {} outside [{lo}, {hi}] for {}",
                p.len(),
                env.name()
            )));
        }
        for &id in p.ids() {
            env.vocab().check_id(id)?;
        }
    }
    match env.task() {
        TaskKind::Classification { num_classes, .. } => {
            for ex in examples {
                match ex.label {
                    Some(c) if c < num_classes => {}
                    Some(c) => {
                        return Err(Error::InvalidExample(format!("label {c} >= {num_classes} classes")));
                    }
                    None => return Err(Error::InvalidExample("classification example without label".into())),
                }
            }
        }
        TaskKind::StyleTransfer { .. } => {
            if let Some(ex) = examples.iter().find(|e| e.style_target.is_none()) {
                return Err(Error::InvalidExample(format!("no style target for {:?}", ex.input_text)));
            }
        }
        TaskKind::Direct => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_matrix_shape_checks() {
        assert!(RewardMatrix::from_rows(vec![vec![1.0, 2.0], vec![3.0]], 2).is_err());
        let m = RewardMatrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]], 2).unwrap();
        assert_eq!(m.get(1, 0), 3.0);
        assert_eq!(m.mean(), 2.5);
        assert_eq!(m.row_mean(0), 1.5);
    }
}
