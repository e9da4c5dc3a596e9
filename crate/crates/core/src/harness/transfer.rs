use serde::{Deserialize, Serialize};

use crate::env::{bootstrap_evaluate, Environment, TaskKind};
use crate::error::{Error, Result};
use crate::text::{Example, Prompt};

use super::metrics::accuracy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMetric {
    /// Mean environment reward over the evaluation set.
    #[default]
    MeanReward,
    /// Fraction of examples whose most probable class is the label.
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Value(f64),
    /// The prompt uses tokens the environment does not have, or has a length
    /// the environment does not accept.
    Untransferable,
}

impl Cell {
    pub fn value(&self) -> Option<f64> {
        match self {
            Cell::Value(v) => Some(*v),
            Cell::Untransferable => None,
        }
    }
}

/// Rows are evaluation environments, columns are prompt sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub envs: Vec<String>,
    pub sources: Vec<String>,
    pub cells: Vec<Vec<Cell>>,
}

impl TransferMatrix {
    pub fn get(&self, env: usize, source: usize) -> Cell {
        self.cells[env][source]
    }

    /// Header row of source names, one row per environment, `NA` for
    /// untransferable cells.
    pub fn to_csv(&self) -> String {
        let esc = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = String::from("env");
        for s in &self.sources {
            out.push(',');
            out.push_str(&esc(s));
        }
        out.push('\n');
        for (name, row) in self.envs.iter().zip(&self.cells) {
            out.push_str(&esc(name));
            for c in row {
                out.push(',');
                match c {
                    Cell::Value(v) => out.push_str(&format!("{v}")),
                    Cell::Untransferable => out.push_str("NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Scores every `(source, tokens)` prompt on every `(env, examples)` pair.
pub fn transfer_matrix(
    prompts: &[(String, Vec<String>)],
    envs: &[(&dyn Environment, &[Example])],
    metric: TransferMetric,
    bootstrap: usize,
    seed: u64,
) -> Result<TransferMatrix> {
    let mut cells = Vec::with_capacity(envs.len());
    for &(env, examples) in envs {
        if examples.is_empty() {
            return Err(Error::InvalidConfig(format!("no evaluation examples for {}", env.name())));
        }
        let (lo, hi) = env.prompt_length_bounds();
        let mut row = Vec::with_capacity(prompts.len());
        for (_, tokens) in prompts {
            if tokens.is_empty() {
                row.push(Cell::Untransferable);
                continue;
            }
            let prompt = match Prompt::from_tokens(tokens, env.vocab()) {
                Ok(p) if (lo..=hi).contains(&p.len()) => p,
                Ok(_) | Err(Error::UnknownToken(_)) | Err(Error::ShapeMismatch(_)) => {
                    row.push(Cell::Untransferable);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let eval = bootstrap_evaluate(env, std::slice::from_ref(&prompt), examples, bootstrap, seed)?;
            let value = match (metric, env.task()) {
                (TransferMetric::MeanReward, _) => eval.rewards.mean(),
                (TransferMetric::Accuracy, TaskKind::Classification { .. }) => {
                    let probs = eval.class_probs.ok_or(Error::NotAClassifier)?;
                    let preds: Vec<usize> = probs[0].iter().map(|p| crate::nn::argmax(p)).collect();
                    let labels: Vec<usize> = examples.iter().map(|e| e.label.expect("validated")).collect();
                    accuracy(&preds, &labels)
                }
                (TransferMetric::Accuracy, _) => return Err(Error::NotAClassifier),
            };
            row.push(Cell::Value(value));
        }
        cells.push(row);
    }
    Ok(TransferMatrix {
        envs: envs.iter().map(|(e, _)| e.name().to_string()).collect(),
        sources: prompts.iter().map(|(s, _)| s.clone()).collect(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{evaluate, SyntheticOracleEnv};
    use crate::text::Vocabulary;

    #[test]
    fn single_cell_equals_evaluate_mean() {
        let (env, ex) = SyntheticOracleEnv::generate(6, 2, &[0.5, 2.0], 1).unwrap();
        let toks = vec!["t1".to_string(), "t2".to_string()];
        let m = transfer_matrix(&[("run".into(), toks.clone())], &[(&env, &ex)], TransferMetric::MeanReward, 1, 0).unwrap();
        let p = Prompt::from_tokens(&toks, env.vocab()).unwrap();
        assert_eq!(m.get(0, 0), Cell::Value(evaluate(&env, &[p], &ex, 0).unwrap().mean()));
    }

    #[test]
    fn unknown_tokens_and_bad_lengths_are_na() {
        let vocab = Vocabulary::new(["a", "b"]).unwrap();
        let env = SyntheticOracleEnv::new(vocab.clone(), Prompt::from_tokens(&["a", "b"], &vocab).unwrap());
        let ex = vec![Example::new("x")];
        let prompts = vec![
            ("ok".to_string(), vec!["b".to_string(), "b".to_string()]),
            ("oov".to_string(), vec!["a".to_string(), "zzz".to_string()]),
            ("short".to_string(), vec!["a".to_string()]),
        ];
        let m = transfer_matrix(&prompts, &[(&env, &ex)], TransferMetric::MeanReward, 1, 0).unwrap();
        assert_eq!(m.cells[0], vec![Cell::Value(0.5), Cell::Untransferable, Cell::Untransferable]);
        assert_eq!(m.to_csv(), "env,ok,oov,short\nsynthetic-oracle,0.5,NA,NA\n");
    }
}
