use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::{Example, Prompt, TokenId, Vocabulary};

use super::{validate_request, Environment, Evaluation, RewardMatrix, TaskKind};

/// Exact oracle with a hidden target prompt:
/// `reward(z, x) = d_x · matches(z, target) / T`.
#[derive(Debug, Clone)]
pub struct SyntheticOracleEnv {
    vocab: Vocabulary,
    target: Prompt,
    difficulty: BTreeMap<String, f64>,
}

impl SyntheticOracleEnv {
    /// Every input not registered with [`Self::with_difficulty`] has `d_x = 1`.
    pub fn new(vocab: Vocabulary, target: Prompt) -> Self {
        Self {
            vocab,
            target,
            difficulty: BTreeMap::new(),
        }
    }

    pub fn with_difficulty(mut self, input_text: impl Into<String>, multiplier: f64) -> Result<Self> {
        if !(multiplier > 0.0 && multiplier.is_finite()) {
            return Err(Error::InvalidConfig("difficulty multipliers must be positive".into()));
        }
        self.difficulty.insert(input_text.into(), multiplier);
        Ok(self)
    }

    /// Vocabulary `t0 … t{n−1}`, a random hidden target, and one input per
    /// multiplier. Input texts are drawn from the vocabulary so the policy
    /// can condition on them.
    pub fn generate(vocab_size: usize, prompt_length: usize, multipliers: &[f64], seed: u64) -> Result<(Self, Vec<Example>)> {
        if vocab_size < 2 || prompt_length == 0 {
            return Err(Error::InvalidConfig("synthetic env needs |V| >= 2 and T >= 1".into()));
        }
        let vocab = Vocabulary::new((0..vocab_size).map(|i| format!("t{i}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<TokenId> = (0..prompt_length)
            .map(|_| rng.random_range(0..vocab_size as TokenId))
            .collect();
        let target = Prompt::new(ids, &vocab)?;
        let mut env = Self::new(vocab.clone(), target);
        let mut examples = Vec::with_capacity(multipliers.len());
        let mut pool: Vec<TokenId> = (0..vocab_size as TokenId).collect();
        for (i, &m) in multipliers.iter().enumerate() {
            pool.shuffle(&mut rng);
            let words = vocab.decode(&pool[..3.min(vocab_size)])?;
            let text = format!("{words} {}", vocab.token((i % vocab_size) as TokenId).unwrap_or("t0"));
            env = env.with_difficulty(text.clone(), m)?;
            examples.push(Example::new(text));
        }
        Ok((env, examples))
    }

    pub fn target(&self) -> &Prompt {
        &self.target
    }

    pub fn difficulty(&self, input_text: &str) -> f64 {
        self.difficulty.get(input_text).copied().unwrap_or(1.0)
    }

    pub fn reward(&self, prompt: &Prompt, example: &Example) -> f64 {
        let matches = prompt
            .ids()
            .iter()
            .zip(self.target.ids())
            .filter(|(a, b)| a == b)
            .count();
        self.difficulty(&example.input_text) * matches as f64 / self.target.len() as f64
    }
}

impl Environment for SyntheticOracleEnv {
    fn name(&self) -> &str {
        "synthetic-oracle"
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn task(&self) -> TaskKind {
        TaskKind::Direct
    }

    fn prompt_length_bounds(&self) -> (usize, usize) {
        (self.target.len(), self.target.len())
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn evaluate(&self, prompts: &[Prompt], examples: &[Example], _seed: u64) -> Result<Evaluation> {
        validate_request(self, prompts, examples)?;
        let mut m = RewardMatrix::zeros(prompts.len(), examples.len());
        for (i, p) in prompts.iter().enumerate() {
            for (j, ex) in examples.iter().enumerate() {
                m.set(i, j, self.reward(p, ex));
            }
        }
        Ok(Evaluation {
            rewards: m,
            class_probs: None,
            outputs: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env3() -> SyntheticOracleEnv {
        let vocab = Vocabulary::new(["a", "b", "c", "d"]).unwrap();
        let target = Prompt::from_tokens(&["a", "b", "c"], &vocab).unwrap();
        SyntheticOracleEnv::new(vocab, target)
    }

    #[test]
    fn exact_match_scores_one() {
        let env = env3();
        let r = env.evaluate(&[env.target().clone()], &[Example::new("x")], 0).unwrap();
        assert_eq!(r.rewards.get(0, 0), 1.0);
    }

    #[test]
    fn partial_match_scales_with_difficulty() {
        let env = env3().with_difficulty("hard", 2.0).unwrap();
        let p = Prompt::from_tokens(&["a", "d", "d"], env.vocab()).unwrap();
        let r = env.evaluate(&[p], &[Example::new("hard")], 0).unwrap();
        assert!((r.rewards.get(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.rewards.get(0, 0) - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn wrong_length_is_rejected() {
        let env = env3();
        let p = Prompt::from_tokens(&["a"], env.vocab()).unwrap();
        assert!(matches!(env.evaluate(&[p], &[Example::new("x")], 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn generated_env_registers_multipliers() {
        let (env, ex) = SyntheticOracleEnv::generate(50, 5, &[0.5, 1.0, 2.0], 3).unwrap();
        assert_eq!(ex.len(), 3);
        let d: Vec<f64> = ex.iter().map(|e| env.difficulty(&e.input_text)).collect();
        assert_eq!(d, vec![0.5, 1.0, 2.0]);
        for e in &ex {
            assert!(env.vocab().encode(&e.input_text).is_ok());
        }
        let r = env.evaluate(&[env.target().clone()], &ex, 0).unwrap();
        assert_eq!(r.rewards.row(0), &[0.5, 1.0, 2.0]);
    }
}
