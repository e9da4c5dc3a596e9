//! A tiny deterministic prompted classifier.
//!
//! The rendered template is split into tokens; each token gets a seeded
//! embedding (any string, in or out of the prompt vocabulary), gated
//! elementwise by a seeded per-position vector so token order matters. The
//! gated mean goes through a seeded mixing layer with `tanh`, and class scores
//! are dot products with per-class weight vectors (by default the output
//! embedding of each verbalizer token). Class probabilities are the softmax of
//! those scores.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Matrix};
use crate::rewards::PiecewiseConfig;
use crate::text::{Example, Prompt, Template, Verbalizers, Vocabulary, DEFAULT_MASK_MARKER};

use super::{validate_request, Environment, Evaluation, RewardMatrix, TaskKind};

const MAX_POSITIONS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyClassifierConfig {
    pub embed_dim: usize,
    pub seed: u64,
    pub template: String,
    pub mask_marker: String,
    /// Multiplier on class scores; larger values give sharper probabilities.
    pub logit_scale: f64,
    /// Gain inside the `tanh` mixing layer.
    pub mix_gain: f64,
    /// Per-example reward reported by `evaluate`.
    pub reward: PiecewiseConfig,
}

impl Default for TinyClassifierConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            seed: 0,
            template: "{input} {prompt} {mask}".to_string(),
            mask_marker: DEFAULT_MASK_MARKER.to_string(),
            logit_scale: 3.0,
            mix_gain: 2.0,
            reward: PiecewiseConfig::unscaled(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TinyClassifierEnv {
    name: String,
    vocab: Vocabulary,
    verbalizers: Verbalizers,
    template: Template,
    config: TinyClassifierConfig,
    mix: Matrix,
    gates: Matrix,
    class_weights: Vec<Vec<f64>>,
    vocab_embeddings: HashMap<String, Vec<f64>>,
}

impl TinyClassifierEnv {
    pub fn new(vocab: Vocabulary, verbalizers: Verbalizers, config: TinyClassifierConfig) -> Result<Self> {
        let template = Template::classification(config.template.clone())?;
        if config.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be positive".into()));
        }
        let dim = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7c1a_55f1_e500_0000);
        let mix = Matrix::gaussian(dim, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
        let gates = Matrix {
            rows: MAX_POSITIONS,
            cols: dim,
            data: (0..MAX_POSITIONS * dim).map(|_| rng.random_range(0.25..1.75)).collect(),
        };
        let class_weights = verbalizers
            .class_tokens()
            .iter()
            .map(|&id| output_embedding(config.seed, vocab.token(id).unwrap_or_default(), dim))
            .collect();
        let vocab_embeddings = vocab
            .tokens()
            .iter()
            .chain(std::iter::once(&config.mask_marker))
            .map(|t| (t.clone(), token_embedding(config.seed, t, dim)))
            .collect();
        Ok(Self {
            name: format!("tiny-classifier-{}", config.seed),
            vocab,
            verbalizers,
            template,
            config,
            mix,
            gates,
            class_weights,
            vocab_embeddings,
        })
    }

    /// A vocabulary `great terrible v2 … v{n−1}` with the first `num_classes`
    /// tokens used as verbalizers.
    pub fn generate(vocab_size: usize, num_classes: usize, config: TinyClassifierConfig) -> Result<Self> {
        const LABEL_WORDS: [&str; 6] = ["great", "terrible", "okay", "awful", "fine", "bad"];
        if num_classes < 2 || num_classes > LABEL_WORDS.len() || vocab_size < num_classes {
            return Err(Error::InvalidConfig(format!(
                "need 2..={} classes and |V| >= classes",
                LABEL_WORDS.len()
            )));
        }
        let tokens: Vec<String> = (0..vocab_size)
            .map(|i| match LABEL_WORDS.get(i) {
                Some(w) if i < num_classes => w.to_string(),
                _ => format!("v{i}"),
            })
            .collect();
        let vocab = Vocabulary::new(tokens)?;
        let verbalizers = Verbalizers::new((0..num_classes as u32).collect(), &vocab)?;
        Self::new(vocab, verbalizers, config)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_class_weights(mut self, weights: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != self.num_classes() || weights.iter().any(|w| w.len() != self.config.embed_dim) {
            return Err(Error::ShapeMismatch("class weights must be classes × embed_dim".into()));
        }
        self.class_weights = weights;
        Ok(self)
    }

    /// Same classifier, different template (must contain `{mask}`).
    pub fn with_template(&self, pattern: &str) -> Result<Self> {
        let mut out = self.clone();
        out.template = Template::classification(pattern)?;
        out.config.template = pattern.to_string();
        Ok(out)
    }

    pub fn config(&self) -> &TinyClassifierConfig {
        &self.config
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn verbalizers(&self) -> &Verbalizers {
        &self.verbalizers
    }

    pub fn num_classes(&self) -> usize {
        self.verbalizers.num_classes()
    }

    pub fn mask_marker(&self) -> &str {
        &self.config.mask_marker
    }

    pub fn mix(&self) -> &Matrix {
        &self.mix
    }

    pub fn gate(&self, position: usize) -> &[f64] {
        self.gates.row(position % MAX_POSITIONS)
    }

    pub fn class_weights(&self) -> &[Vec<f64>] {
        &self.class_weights
    }

    pub fn embedding(&self, token: &str) -> Vec<f64> {
        match self.vocab_embeddings.get(token) {
            Some(e) => e.clone(),
            None => token_embedding(self.config.seed, token, self.config.embed_dim),
        }
    }

    /// Class probabilities for an already rendered text.
    pub fn probabilities_for_rendered(&self, rendered: &str) -> Vec<f64> {
        let dim = self.config.embed_dim;
        let tokens: Vec<&str> = rendered.split_whitespace().collect();
        let mut mean = vec![0.0; dim];
        for (pos, tok) in tokens.iter().enumerate() {
            let e = self.embedding(tok);
            for ((m, g), v) in mean.iter_mut().zip(self.gate(pos)).zip(&e) {
                *m += g * v;
            }
        }
        let n = tokens.len().max(1) as f64;
        let mixed: Vec<f64> = self
            .mix
            .matvec(&mean.iter().map(|m| m / n).collect::<Vec<_>>())
            .into_iter()
            .map(|v| (self.config.mix_gain * v).tanh())
            .collect();
        let norm = self.config.logit_scale / (dim as f64).sqrt();
        let scores: Vec<f64> = self.class_weights.iter().map(|w| norm * nn::dot(w, &mixed)).collect();
        nn::softmax(&scores)
    }

    /// Class probabilities for a prompt given as text (may be empty).
    pub fn probabilities_for_text(&self, prompt_text: &str, input_text: &str) -> Vec<f64> {
        let rendered = self.template.render(prompt_text, input_text, &self.config.mask_marker);
        self.probabilities_for_rendered(&rendered)
    }

    pub fn probabilities(&self, prompt: &Prompt, example: &Example) -> Vec<f64> {
        self.probabilities_for_text(prompt.text(), &example.input_text)
    }

    /// Content words `c0, c1, …` (outside the prompt vocabulary) ranked by how
    /// strongly the classifier associates each with a class when read alone.
    fn class_word_pools(&self, pool_size: usize) -> Vec<Vec<String>> {
        let k = self.num_classes();
        let mut scored: Vec<Vec<(f64, String)>> = vec![Vec::new(); k];
        for i in 0..(pool_size * k * 8) {
            let w = format!("c{i}");
            let probs = self.probabilities_for_rendered(&w);
            let best = nn::argmax(&probs);
            let margin = probs[best] - probs.iter().enumerate().filter(|&(c, _)| c != best).map(|(_, &p)| p).fold(0.0, f64::max);
            scored[best].push((margin, w));
        }
        scored
            .into_iter()
            .map(|mut s| {
                s.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                s.into_iter().take(pool_size).map(|(_, w)| w).collect()
            })
            .collect()
    }

    /// Few-shot examples with `counts[c]` inputs of class `c`. Each input has
    /// `words` content words: all but one are drawn from the class's pool.
    pub fn dataset(&self, counts: &[usize], words: usize, seed: u64) -> Result<Vec<Example>> {
        if counts.len() != self.num_classes() || words == 0 {
            return Err(Error::InvalidConfig("one count per class and words >= 1 required".into()));
        }
        let pools = self.class_word_pools(12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for (class, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let mut ws: Vec<String> = (0..words.saturating_sub(1))
                    .map(|_| pools[class][rng.random_range(0..pools[class].len())].clone())
                    .collect();
                let other = rng.random_range(0..self.num_classes());
                ws.push(pools[other][rng.random_range(0..pools[other].len())].clone());
                ws.shuffle(&mut rng);
                out.push(Example::labeled(ws.join(" "), class));
            }
        }
        out.shuffle(&mut rng);
        Ok(out)
    }
}

fn token_embedding(seed: u64, token: &str, dim: usize) -> Vec<f64> {
    nn::gaussian_vec(dim, 1.0, &mut nn::keyed_rng(seed, token))
}

fn output_embedding(seed: u64, token: &str, dim: usize) -> Vec<f64> {
    nn::gaussian_vec(dim, 1.0, &mut nn::keyed_rng(seed, &format!("\u{0}out\u{0}{token}")))
}

impl Environment for TinyClassifierEnv {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn task(&self) -> TaskKind {
        TaskKind::Classification {
            num_classes: self.num_classes(),
            mask_marker: self.config.mask_marker.clone(),
        }
    }

    fn prompt_length_bounds(&self) -> (usize, usize) {
        (1, 16)
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn evaluate(&self, prompts: &[Prompt], examples: &[Example], _seed: u64) -> Result<Evaluation> {
        validate_request(self, prompts, examples)?;
        let mut rewards = RewardMatrix::zeros(prompts.len(), examples.len());
        let mut probs = Vec::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            let mut row = Vec::with_capacity(examples.len());
            for (j, ex) in examples.iter().enumerate() {
                let pr = self.probabilities(p, ex);
                let label = ex.label.expect("validated");
                rewards.set(i, j, crate::rewards::piecewise_reward(&pr, label, &self.config.reward));
                row.push(pr);
            }
            probs.push(row);
        }
        Ok(Evaluation {
            rewards,
            class_probs: Some(probs),
            outputs: None,
        })
    }

    fn class_probabilities(&self, prompt: &Prompt, example: &Example) -> Result<Vec<f64>> {
        Ok(self.probabilities(prompt, example))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::TokenId;

    fn env() -> TinyClassifierEnv {
        TinyClassifierEnv::generate(20, 2, TinyClassifierConfig::default()).unwrap()
    }

    #[test]
    fn equal_class_weights_give_uniform_probabilities() {
        let e = env().with_class_weights(vec![vec![0.3; 16]; 2]).unwrap();
        let p = Prompt::new(vec![4, 7], e.vocab()).unwrap();
        let probs = e.probabilities(&p, &Example::labeled("c1 c2", 0));
        assert!((probs[0] - 0.5).abs() < 1e-12 && (probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn probabilities_normalize() {
        let e = TinyClassifierEnv::generate(20, 4, TinyClassifierConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let ids: Vec<TokenId> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..20)).collect();
            let p = Prompt::new(ids, e.vocab()).unwrap();
            let input = format!("c{} c{}", rng.random_range(0..200), rng.random_range(0..200));
            let probs = e.class_probabilities(&p, &Example::labeled(input, 0)).unwrap();
            assert!(probs.iter().all(|&x| x >= 0.0));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn token_order_matters() {
        let e = env();
        let ex = Example::labeled("c3 c9 c27", 1);
        let ab = e.probabilities(&Prompt::new(vec![5, 11], e.vocab()).unwrap(), &ex);
        let ba = e.probabilities(&Prompt::new(vec![11, 5], e.vocab()).unwrap(), &ex);
        assert!((ab[0] - ba[0]).abs() > 1e-9);
    }

    /// Scores the rendered template with freshly written loops over the
    /// environment's exposed parameters.
    fn reference_probs(e: &TinyClassifierEnv, prompt: &Prompt, input: &str) -> Vec<f64> {
        let rendered = format!("{input} {} {}", prompt.text(), e.mask_marker());
        let toks: Vec<&str> = rendered.split(' ').filter(|s| !s.is_empty()).collect();
        let dim = e.config().embed_dim;
        let mut avg = vec![0.0; dim];
        for (i, t) in toks.iter().enumerate() {
            let emb = e.embedding(t);
            for d in 0..dim {
                avg[d] += e.gate(i)[d] * emb[d] / toks.len() as f64;
            }
        }
        let mut hidden = vec![0.0; dim];
        for r in 0..dim {
            let mut s = 0.0;
            for c in 0..dim {
                s += e.mix().data[r * dim + c] * avg[c];
            }
            hidden[r] = (e.config().mix_gain * s).tanh();
        }
        let logits: Vec<f64> = e
            .class_weights()
            .iter()
            .map(|w| w.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>() * e.config().logit_scale / (dim as f64).sqrt())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        logits.iter().map(|l| l.exp() / z).collect()
    }

    #[test]
    fn reward_matches_independent_scoring_path() {
        let e = env();
        let data = e.dataset(&[8, 8], 4, 1).unwrap();
        let prompts: Vec<Prompt> = [[2u32, 3], [9, 17], [0, 1]]
            .iter()
            .map(|ids| Prompt::new(ids.to_vec(), e.vocab()).unwrap())
            .collect();
        let eval = e.evaluate(&prompts, &data, 0).unwrap();
        for (i, p) in prompts.iter().enumerate() {
            let mut total = 0.0;
            for ex in &data {
                let probs = reference_probs(&e, p, &ex.input_text);
                let c = ex.label.unwrap();
                let gap = probs[c] - probs[1 - c];
                total += if gap > 0.0 { 200.0 * gap } else { 180.0 * gap };
            }
            let expected = total / data.len() as f64;
            assert!((eval.rewards.row_mean(i) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn dataset_respects_counts() {
        let e = env();
        let data = e.dataset(&[24, 8], 4, 3).unwrap();
        assert_eq!(data.iter().filter(|x| x.label == Some(0)).count(), 24);
        assert_eq!(data.iter().filter(|x| x.label == Some(1)).count(), 8);
        assert!(data.iter().all(|x| x.input_text.split(' ').count() == 4));
    }

    #[test]
    fn invalid_labels_are_rejected() {
        let e = env();
        let p = Prompt::new(vec![1], e.vocab()).unwrap();
        assert!(e.evaluate(&[p.clone()], &[Example::labeled("c1", 2)], 0).is_err());
        assert!(e.evaluate(&[p], &[Example::new("c1")], 0).is_err());
    }
}
