//! Fluency constraint: restrict each prompt step to the reference model's
//! top-k next tokens.

use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn;
use crate::text::TokenId;

use super::ActionMask;

/// A causal next-token scorer. Any monotone score works (log-probs, logits).
pub trait NextTokenScorer: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn next_token_scores(&self, prefix: &[TokenId]) -> Vec<f64>;
}

/// Bigram reference model over log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    start: Vec<f64>,
    transitions: Vec<Vec<f64>>,
}

impl BigramModel {
    pub fn new(start: Vec<f64>, transitions: Vec<Vec<f64>>) -> Self {
        assert_eq!(start.len(), transitions.len());
        assert!(transitions.iter().all(|r| r.len() == start.len()));
        Self { start, transitions }
    }

    /// Deterministic chain: token `i` is followed by `successors[i]`; the chain
    /// starts at `first`.
    pub fn from_successors(first: TokenId, successors: &[TokenId]) -> Self {
        let n = successors.len();
        let peaked = |hot: TokenId| -> Vec<f64> {
            (0..n)
                .map(|j| if j == hot as usize { 0.0 } else { -20.0 })
                .collect()
        };
        Self {
            start: peaked(first),
            transitions: successors.iter().map(|&s| peaked(s)).collect(),
        }
    }

    pub fn random(vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = || {
            let logits = nn::gaussian_vec(vocab_size, 2.0, &mut rng);
            let lse = nn::logsumexp(&logits);
            logits.into_iter().map(|l| l - lse).collect::<Vec<_>>()
        };
        let start = row();
        let transitions = (0..vocab_size).map(|_| row()).collect();
        Self { start, transitions }
    }
}

impl NextTokenScorer for BigramModel {
    fn vocab_size(&self) -> usize {
        self.start.len()
    }

    fn next_token_scores(&self, prefix: &[TokenId]) -> Vec<f64> {
        match prefix.last() {
            None => self.start.clone(),
            Some(&t) => self.transitions[t as usize].clone(),
        }
    }
}

/// Action mask keeping the reference model's `k` best next tokens.
#[derive(Clone)]
pub struct FluencyMask {
    reference: Arc<dyn NextTokenScorer>,
    k: usize,
}

impl FluencyMask {
    pub fn k(&self) -> usize {
        self.k
    }
}

pub fn fluency_mask(reference: Arc<dyn NextTokenScorer>, k: usize) -> FluencyMask {
    assert!(k >= 1, "fluency mask needs k >= 1");
    FluencyMask { reference, k }
}

impl ActionMask for FluencyMask {
    fn allowed(&self, _step: usize, prefix: &[TokenId]) -> Vec<TokenId> {
        let scores = self.reference.next_token_scores(prefix);
        let mut order: Vec<TokenId> = (0..scores.len() as TokenId).collect();
        order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
        order.truncate(self.k);
        order.sort_unstable();
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{greedy_prompt, sample_prompt, Policy, PolicyConfig, SamplingConfig};

    fn policy(vocab: usize, t: usize) -> Policy {
        Policy::new(PolicyConfig {
            vocab_size: vocab,
            prompt_length: t,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            adapter_hidden: 6,
            adapter_init_scale: 2.0,
            max_context: 32,
            seed: 9,
            ..PolicyConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn full_width_mask_is_vacuous() {
        let p = policy(6, 3);
        let mask = fluency_mask(Arc::new(BigramModel::random(6, 1)), 6);
        assert_eq!(mask.allowed(0, &[]), (0..6).collect::<Vec<_>>());
        let ctx = p.placeholder_context();
        let free = sample_prompt(&p, &ctx, &SamplingConfig::default(), 12).unwrap();
        let masked_cfg = SamplingConfig {
            action_mask: Some(Arc::new(mask)),
            ..SamplingConfig::default()
        };
        let masked = sample_prompt(&p, &ctx, &masked_cfg, 12).unwrap();
        assert_eq!(free.ids, masked.ids);
    }

    #[test]
    fn k1_follows_successor_chain() {
        // 0 -> 3 -> 1 -> 4 -> 2 -> 0, starting at 3
        let successors = [3, 4, 0, 1, 2];
        let reference = Arc::new(BigramModel::from_successors(3, &successors));
        let mask = fluency_mask(reference, 1);
        let p = policy(5, 5);
        let expected = vec![3, 1, 4, 2, 0];
        assert_eq!(greedy_prompt(&p, &p.placeholder_context(), Some(&mask)).unwrap(), expected);
        let cfg = SamplingConfig {
            action_mask: Some(Arc::new(mask)),
            ..SamplingConfig::default()
        };
        for seed in 0..10 {
            assert_eq!(sample_prompt(&p, &p.placeholder_context(), &cfg, seed).unwrap().ids, expected);
        }
    }

    #[test]
    fn top20_constraint_holds_for_sampled_prompts() {
        let reference = Arc::new(BigramModel::random(60, 4));
        let mask = fluency_mask(reference.clone(), 20);
        let p = policy(60, 5);
        let cfg = SamplingConfig {
            action_mask: Some(Arc::new(mask)),
            ..SamplingConfig::default()
        };
        for seed in 0..100 {
            let s = sample_prompt(&p, &p.placeholder_context(), &cfg, seed).unwrap();
            for t in 0..s.ids.len() {
                let scores = reference.next_token_scores(&s.ids[..t]);
                let mine = scores[s.ids[t] as usize];
                let better = scores.iter().filter(|&&v| v > mine).count();
                assert!(better < 20, "token at step {t} ranks {better}");
            }
        }
    }
}
