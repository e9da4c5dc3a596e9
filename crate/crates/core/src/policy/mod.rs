//! The prompt-generating policy: a frozen causal encoder, a trainable adapter
//! and the frozen (tied) output head. Head outputs are read directly as soft
//! Q-values; the sampling policy is `softmax(Q / τ)`.

mod adapter;
mod checkpoint;
mod encoder;
mod fluency;
mod sampling;

use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::TokenId;

pub use adapter::{Adapter, AdapterActivations};
pub use checkpoint::Checkpoint;
pub use encoder::Encoder;
pub use fluency::{fluency_mask, BigramModel, FluencyMask, NextTokenScorer};
pub use sampling::{greedy_prompt, sample_prompt, sample_prompt_with, ActionMask, SampledPrompt, SamplingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    /// Prompt length `T`.
    pub prompt_length: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub adapter_hidden: usize,
    /// Std of the adapter output layer at init, relative to `1/sqrt(hidden)`.
    pub adapter_init_scale: f64,
    pub max_context: usize,
    /// Condition on the task input rather than a fixed placeholder.
    pub condition_on_input: bool,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            prompt_length: 2,
            model_dim: 64,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 128,
            adapter_hidden: 256,
            adapter_init_scale: 0.1,
            max_context: 32,
            condition_on_input: false,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn new(vocab_size: usize, prompt_length: usize) -> Self {
        Self {
            vocab_size,
            prompt_length,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.prompt_length == 0 {
            return bad("prompt_length must be at least 1");
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return bad("model_dim must be a positive multiple of num_heads");
        }
        if self.adapter_hidden == 0 || self.ffn_dim == 0 {
            return bad("adapter_hidden and ffn_dim must be positive");
        }
        if self.max_context <= self.prompt_length + 1 {
            return bad("max_context must exceed prompt_length + 1");
        }
        Ok(())
    }
}

/// Token ids prepended to the policy's context.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConditioningContext {
    prefix_ids: Vec<TokenId>,
}

impl ConditioningContext {
    pub fn new(prefix_ids: Vec<TokenId>) -> Result<Self> {
        if prefix_ids.is_empty() {
            return Err(Error::InvalidConfig("conditioning context must be non-empty".into()));
        }
        Ok(Self { prefix_ids })
    }

    pub fn prefix_ids(&self) -> &[TokenId] {
        &self.prefix_ids
    }
}

/// Frozen encoder and head shared by reference, trainable adapter owned.
#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    encoder: Arc<Encoder>,
    adapter: Adapter,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Arc::new(Encoder::seeded(&config));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let adapter = Adapter::seeded(
            config.model_dim,
            config.adapter_hidden,
            config.adapter_init_scale,
            &mut rng,
        );
        Ok(Self {
            config,
            encoder,
            adapter,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut Adapter {
        &mut self.adapter
    }

    /// Replaces the adapter; shapes must match.
    pub fn set_adapter(&mut self, adapter: Adapter) -> Result<()> {
        if adapter.model_dim() != self.config.model_dim || adapter.hidden() != self.config.adapter_hidden {
            return Err(Error::ShapeMismatch("adapter shape differs from policy config".into()));
        }
        self.adapter = adapter;
        Ok(())
    }

    /// Same frozen parts, different adapter.
    pub fn with_adapter(&self, adapter: Adapter) -> Result<Self> {
        let mut p = self.clone();
        p.set_adapter(adapter)?;
        Ok(p)
    }

    pub fn shares_frozen_parts(&self, other: &Policy) -> bool {
        Arc::ptr_eq(&self.encoder, &other.encoder)
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn prompt_length(&self) -> usize {
        self.config.prompt_length
    }

    pub fn placeholder_context(&self) -> ConditioningContext {
        ConditioningContext {
            prefix_ids: vec![self.encoder.placeholder_id()],
        }
    }

    /// Placeholder followed by the input's ids, truncated so the full prompt
    /// still fits in the context window.
    pub fn input_context(&self, input_ids: &[TokenId]) -> Result<ConditioningContext> {
        for &id in input_ids {
            self.check_id(id)?;
        }
        let room = self.config.max_context - self.config.prompt_length - 2;
        let mut prefix_ids = vec![self.encoder.placeholder_id()];
        prefix_ids.extend(input_ids.iter().take(room));
        Ok(ConditioningContext { prefix_ids })
    }

    fn check_id(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.config.vocab_size {
            Ok(())
        } else {
            Err(Error::InvalidTokenId {
                id,
                vocab_size: self.config.vocab_size,
            })
        }
    }

    fn check_context(&self, ctx: &ConditioningContext, partial: &[TokenId]) -> Result<()> {
        if partial.len() >= self.config.prompt_length {
            return Err(Error::PromptComplete(partial.len()));
        }
        let placeholder = self.encoder.placeholder_id();
        for &id in ctx.prefix_ids() {
            if id != placeholder {
                self.check_id(id)?;
            }
        }
        for &id in partial {
            self.check_id(id)?;
        }
        if ctx.prefix_ids().len() + partial.len() + 1 > self.config.max_context {
            return Err(Error::InvalidConfig("context exceeds max_context".into()));
        }
        Ok(())
    }

    /// Encoder features for the state `(ctx, partial)`, read at a trailing
    /// placeholder slot so the position of the next token dominates them.
    /// Independent of the adapter, so online and target copies can share them.
    pub fn features(&self, ctx: &ConditioningContext, partial: &[TokenId]) -> Result<Vec<f64>> {
        self.check_context(ctx, partial)?;
        Ok(self.features_unchecked(ctx, partial))
    }

    pub(crate) fn features_unchecked(&self, ctx: &ConditioningContext, partial: &[TokenId]) -> Vec<f64> {
        let mut ids = Vec::with_capacity(ctx.prefix_ids.len() + partial.len() + 1);
        ids.extend_from_slice(&ctx.prefix_ids);
        ids.extend_from_slice(partial);
        ids.push(self.encoder.placeholder_id());
        self.encoder.last_hidden(&ids)
    }

    pub fn q_from_features(&self, h: &[f64]) -> Vec<f64> {
        self.encoder.head(&self.adapter.forward(h).output)
    }

    /// Soft Q-values over the vocabulary for the next prompt token.
    pub fn q_values(&self, ctx: &ConditioningContext, partial: &[TokenId]) -> Result<Vec<f64>> {
        let h = self.features(ctx, partial)?;
        Ok(self.q_from_features(&h))
    }

    /// Adds `Σ_v dq[v] · ∂q_v/∂θ` into `grad` for the state with features `h`.
    pub fn backprop_q(&self, h: &[f64], dq: &[(TokenId, f64)], grad: &mut [f64]) {
        let acts = self.adapter.forward(h);
        let mut d_out = vec![0.0; self.config.model_dim];
        for &(v, g) in dq {
            for (d, e) in d_out.iter_mut().zip(self.encoder.head_row(v)) {
                *d += g * e;
            }
        }
        self.adapter.backward(h, &acts, &d_out, grad);
    }

    /// Digest of the frozen encoder and head weights.
    pub fn frozen_fingerprint(&self) -> u64 {
        self.encoder.fingerprint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PolicyConfig {
        PolicyConfig {
            vocab_size: 7,
            prompt_length: 3,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            adapter_hidden: 5,
            adapter_init_scale: 1.0,
            max_context: 8,
            seed: 11,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn zero_adapter_yields_head_of_zero() {
        let mut p = Policy::new(small_config()).unwrap();
        p.set_adapter(Adapter::zeros(8, 5)).unwrap();
        let q = p.q_values(&p.placeholder_context(), &[2]).unwrap();
        assert_eq!(q, vec![0.0; 7]);
    }

    #[test]
    fn q_values_are_deterministic() {
        let p = Policy::new(small_config()).unwrap();
        let ctx = ConditioningContext::new(vec![1, 4]).unwrap();
        let a = p.q_values(&ctx, &[3]).unwrap();
        let b = Policy::new(small_config()).unwrap().q_values(&ctx, &[3]).unwrap();
        assert_eq!(a.len(), 7);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn complete_prompt_is_rejected() {
        let p = Policy::new(small_config()).unwrap();
        assert!(matches!(
            p.q_values(&p.placeholder_context(), &[0, 1, 2]),
            Err(Error::PromptComplete(3))
        ));
    }

    #[test]
    fn invalid_ids_are_rejected() {
        let p = Policy::new(small_config()).unwrap();
        assert!(p.q_values(&p.placeholder_context(), &[9]).is_err());
        assert!(ConditioningContext::new(vec![]).is_err());
    }

    #[test]
    fn q_jacobian_matches_central_differences() {
        let p = Policy::new(small_config()).unwrap();
        let ctx = p.input_context(&[5, 1]).unwrap();
        let partial = [4, 0];
        let h = p.features(&ctx, &partial).unwrap();
        let eps = 1e-5;
        for v in 0..7u32 {
            let mut grad = vec![0.0; p.adapter().len()];
            p.backprop_q(&h, &[(v, 1.0)], &mut grad);
            for i in 0..grad.len() {
                let mut plus = p.clone();
                plus.adapter_mut().params_mut()[i] += eps;
                let mut minus = p.clone();
                minus.adapter_mut().params_mut()[i] -= eps;
                let fd = (plus.q_from_features(&h)[v as usize] - minus.q_from_features(&h)[v as usize]) / (2.0 * eps);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(err <= 1e-4, "param {i}, token {v}: fd {fd} vs analytic {}", grad[i]);
            }
        }
    }

    #[test]
    fn input_context_truncates_to_window() {
        let p = Policy::new(small_config()).unwrap();
        let ctx = p.input_context(&[1; 20]).unwrap();
        // Room for the placeholder, the prompt, and the query slot.
        assert_eq!(ctx.prefix_ids().len(), 8 - 3 - 1);
        assert!(p.q_values(&ctx, &[0, 0]).is_ok());
    }
}
