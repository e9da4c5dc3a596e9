//! Simulated prompted text style transfer.
//!
//! The rewriter copies the input word by word and replaces each word, with a
//! probability that the prompt modulates around a base of 0.3, by a
//! style-marked synonym from a seeded table. The prompt also steers which
//! style the synonyms carry. Candidates are scored by unigram overlap with the
//! input (content) and by a fixed linear style classifier (style); the reward
//! of a `(prompt, input)` cell is the best combined score over the candidates.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::rewards::tst_reward;
use crate::text::{Example, Prompt, TokenId, Vocabulary};

use super::{validate_request, Environment, Evaluation, RewardMatrix, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TstSimConfig {
    pub seed: u64,
    pub num_styles: usize,
    pub num_candidates: usize,
    pub base_replace_prob: f64,
    pub synonyms_per_style: usize,
    pub template: String,
}

impl Default for TstSimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_styles: 2,
            num_candidates: 32,
            base_replace_prob: 0.3,
            synonyms_per_style: 2,
            template: "{prompt} \"{input}\" \"".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TstSimEnv {
    vocab: Vocabulary,
    config: TstSimConfig,
    rate_push: Vec<f64>,
    style_push: Vec<Vec<f64>>,
    style_weights: HashMap<String, Vec<f64>>,
}

/// One scored rewrite.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub text: String,
    pub content: f64,
    pub style: f64,
    pub combined: f64,
}

impl TstSimEnv {
    pub fn new(vocab: Vocabulary, config: TstSimConfig) -> Result<Self> {
        if config.num_styles < 2 || config.num_candidates == 0 || config.synonyms_per_style == 0 {
            return Err(Error::InvalidConfig("need >= 2 styles, >= 1 candidate and >= 1 synonym".into()));
        }
        if !(config.base_replace_prob > 0.0 && config.base_replace_prob < 1.0) {
            return Err(Error::InvalidConfig("base_replace_prob must lie in (0, 1)".into()));
        }
        crate::text::Template::generation(config.template.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x75c5_1a00_0000_0001);
        let n = vocab.len();
        let rate_push = nn::gaussian_vec(n, 1.0, &mut rng);
        let style_push = (0..n).map(|_| nn::gaussian_vec(config.num_styles, 1.5, &mut rng)).collect();
        let mut style_weights = HashMap::new();
        for tok in vocab.tokens() {
            style_weights.insert(tok.clone(), nn::gaussian_vec(config.num_styles, 0.3, &mut rng));
            for s in 0..config.num_styles {
                for k in 0..config.synonyms_per_style {
                    let mut w = nn::gaussian_vec(config.num_styles, 0.3, &mut rng);
                    w[s] += rng.random_range(2.0..4.0);
                    style_weights.insert(synonym(tok, s, k), w);
                }
            }
        }
        Ok(Self {
            vocab,
            config,
            rate_push,
            style_push,
            style_weights,
        })
    }

    /// Vocabulary `w0 … w{n−1}`.
    pub fn generate(vocab_size: usize, config: TstSimConfig) -> Result<Self> {
        Self::new(Vocabulary::new((0..vocab_size).map(|i| format!("w{i}")))?, config)
    }

    /// Inputs of 4–7 vocabulary words, all targeting `style_target`.
    pub fn dataset(&self, n: usize, style_target: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(4..8);
                let ids: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..self.vocab.len() as TokenId)).collect();
                Example::styled(self.vocab.decode(&ids).expect("ids in range"), style_target)
            })
            .collect()
    }

    /// Same simulator with a different candidate count.
    pub fn with_num_candidates(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("num_candidates must be positive".into()));
        }
        let mut out = self.clone();
        out.config.num_candidates = n;
        Ok(out)
    }

    pub fn config(&self) -> &TstSimConfig {
        &self.config
    }

    pub fn num_styles(&self) -> usize {
        self.config.num_styles
    }

    /// Unigram overlap: multiset intersection size over input length.
    pub fn content_score(input: &str, output: &str) -> f64 {
        let mut counts: HashMap<&str, isize> = HashMap::new();
        let mut n_in = 0usize;
        for w in input.split_whitespace() {
            *counts.entry(w).or_default() += 1;
            n_in += 1;
        }
        if n_in == 0 {
            return 1.0;
        }
        let mut hit = 0usize;
        for w in output.split_whitespace() {
            if let Some(c) = counts.get_mut(w) {
                if *c > 0 {
                    *c -= 1;
                    hit += 1;
                }
            }
        }
        hit as f64 / n_in as f64
    }

    /// Probability of `style` under the fixed linear style classifier.
    pub fn style_score(&self, output: &str, style: usize) -> f64 {
        let mut logits = vec![0.0; self.config.num_styles];
        let mut n = 0usize;
        for w in output.split_whitespace() {
            if let Some(ws) = self.style_weights.get(w) {
                for (l, v) in logits.iter_mut().zip(ws) {
                    *l += v;
                }
            }
            n += 1;
        }
        let scale = 1.0 / (n.max(1) as f64).sqrt();
        let scaled: Vec<f64> = logits.iter().map(|l| l * scale).collect();
        nn::softmax(&scaled)[style]
    }

    fn replace_prob(&self, prompt: &[TokenId]) -> f64 {
        let p0 = self.config.base_replace_prob;
        let push: f64 = prompt.iter().map(|&t| self.rate_push[t as usize]).sum::<f64>() / (prompt.len().max(1) as f64).sqrt();
        let logit = (p0 / (1.0 - p0)).ln() + push;
        1.0 / (1.0 + (-logit).exp())
    }

    fn style_distribution(&self, prompt: &[TokenId]) -> Vec<f64> {
        let mut logits = vec![0.0; self.config.num_styles];
        for &t in prompt {
            for (l, v) in logits.iter_mut().zip(&self.style_push[t as usize]) {
                *l += v;
            }
        }
        nn::softmax(&logits)
    }

    /// All candidates for one cell, in generation order.
    pub fn candidates(&self, prompt: &[TokenId], example: &Example, seed: u64) -> Result<Vec<Candidate>> {
        let target = example
            .style_target
            .filter(|&s| s < self.config.num_styles)
            .ok_or_else(|| Error::InvalidExample("missing or invalid style target".into()))?;
        let prompt_text = self.vocab.decode(prompt)?;
        let key = format!("{prompt_text}\u{1}{}\u{1}{target}", example.input_text);
        let mut rng = nn::keyed_rng(seed, &key);
        let p = self.replace_prob(prompt);
        let styles = self.style_distribution(prompt);
        let words: Vec<&str> = example.input_text.split_whitespace().collect();
        let mut out = Vec::with_capacity(self.config.num_candidates);
        for _ in 0..self.config.num_candidates {
            let text = words
                .iter()
                .map(|&w| {
                    if rng.random::<f64>() < p {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut s = styles.len() - 1;
                        for (i, q) in styles.iter().enumerate() {
                            acc += q;
                            if u < acc {
                                s = i;
                                break;
                            }
                        }
                        synonym(w, s, rng.random_range(0..self.config.synonyms_per_style))
                    } else {
                        w.to_string()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ");
            let content = Self::content_score(&example.input_text, &text);
            let style = self.style_score(&text, target);
            let combined = tst_reward(content, style)?;
            out.push(Candidate {
                text,
                content,
                style,
                combined,
            });
        }
        Ok(out)
    }

    /// Highest-scoring candidate; the first one wins ties.
    pub fn best_candidate(&self, prompt: &[TokenId], example: &Example, seed: u64) -> Result<Candidate> {
        let cands = self.candidates(prompt, example, seed)?;
        let mut best = 0;
        for (i, c) in cands.iter().enumerate() {
            if c.combined > cands[best].combined {
                best = i;
            }
        }
        Ok(cands.into_iter().nth(best).expect("at least one candidate"))
    }
}

fn synonym(word: &str, style: usize, k: usize) -> String {
    format!("{word}~s{style}{}", (b'a' + k as u8) as char)
}

impl Environment for TstSimEnv {
    fn name(&self) -> &str {
        "tst-sim"
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn task(&self) -> TaskKind {
        TaskKind::StyleTransfer {
            num_candidates: self.config.num_candidates,
        }
    }

    fn prompt_length_bounds(&self) -> (usize, usize) {
        (1, 16)
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn evaluate(&self, prompts: &[Prompt], examples: &[Example], seed: u64) -> Result<Evaluation> {
        validate_request(self, prompts, examples)?;
        let mut rewards = RewardMatrix::zeros(prompts.len(), examples.len());
        let mut outputs = Vec::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            let mut row = Vec::with_capacity(examples.len());
            for (j, ex) in examples.iter().enumerate() {
                let best = self.best_candidate(p.ids(), ex, seed)?;
                rewards.set(i, j, best.combined);
                row.push(best.text);
            }
            outputs.push(row);
        }
        Ok(Evaluation {
            rewards,
            class_probs: None,
            outputs: Some(outputs),
        })
    }
}
