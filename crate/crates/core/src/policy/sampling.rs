use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::text::{Prompt, TokenId, Vocabulary};

use super::{ConditioningContext, Policy};

/// Per-step admissible token set.
pub trait ActionMask: Send + Sync {
    /// Allowed tokens at `step` given the prompt so far, in ascending id order.
    fn allowed(&self, step: usize, prefix: &[TokenId]) -> Vec<TokenId>;
}

#[derive(Clone)]
pub struct SamplingConfig {
    pub top_k: Option<usize>,
    /// Added to every logit before truncation.
    pub logit_bias: f64,
    pub temperature: f64,
    pub action_mask: Option<Arc<dyn ActionMask>>,
}

impl fmt::Debug for SamplingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SamplingConfig")
            .field("top_k", &self.top_k)
            .field("logit_bias", &self.logit_bias)
            .field("temperature", &self.temperature)
            .field("action_mask", &self.action_mask.is_some())
            .finish()
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_k: None,
            logit_bias: 0.0,
            temperature: 1.0,
            action_mask: None,
        }
    }
}

impl SamplingConfig {
    pub fn top_k(k: usize) -> Self {
        Self {
            top_k: Some(k),
            ..Self::default()
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        match self.top_k {
            Some(0) => Err(Error::InvalidConfig("top_k must be positive".into())),
            Some(k) if k > vocab_size => Err(Error::InvalidConfig(format!(
                "top_k {k} exceeds vocabulary size {vocab_size}"
            ))),
            _ if !self.logit_bias.is_finite() => Err(Error::InvalidConfig("logit_bias must be finite".into())),
            _ => Ok(()),
        }
    }

    /// The restricted, renormalized next-token distribution as `(token, log-prob)`
    /// pairs ordered by descending logit.
    pub fn step_distribution(&self, q: &[f64], step: usize, prefix: &[TokenId]) -> Result<Vec<(TokenId, f64)>> {
        let mut cands: Vec<(TokenId, f64)> = match &self.action_mask {
            Some(mask) => mask
                .allowed(step, prefix)
                .into_iter()
                .filter(|&t| (t as usize) < q.len())
                .map(|t| (t, q[t as usize] + self.logit_bias))
                .collect(),
            None => q
                .iter()
                .enumerate()
                .map(|(t, &v)| (t as TokenId, v + self.logit_bias))
                .collect(),
        };
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if let Some(k) = self.top_k {
            cands.truncate(k);
        }
        if cands.is_empty() {
            return Err(Error::EmptyActionSet(step));
        }
        let scaled: Vec<f64> = cands.iter().map(|c| c.1 / self.temperature).collect();
        let lse = nn::logsumexp(&scaled);
        Ok(cands
            .iter()
            .zip(scaled)
            .map(|(c, s)| (c.0, s - lse))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledPrompt {
    pub ids: Vec<TokenId>,
    /// Log-probability of each chosen token under the restricted distribution.
    pub log_probs: Vec<f64>,
    /// Online Q-values at every step, before the logit bias.
    pub q_values: Vec<Vec<f64>>,
    /// What the sampler saw: Q-values shifted by the logit bias.
    pub logits: Vec<Vec<f64>>,
}

impl SampledPrompt {
    pub fn prompt(&self, vocab: &Vocabulary) -> Result<Prompt> {
        Prompt::new(self.ids.clone(), vocab)
    }
}

pub fn sample_prompt(
    policy: &Policy,
    ctx: &ConditioningContext,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<SampledPrompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_prompt_with(policy, ctx, cfg, &mut rng)
}

/// Autoregressive sampling: bias, mask, top-k, then `softmax(logits / τ)`.
pub fn sample_prompt_with<R: Rng>(
    policy: &Policy,
    ctx: &ConditioningContext,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<SampledPrompt> {
    cfg.validate(policy.vocab_size())?;
    let t_len = policy.prompt_length();
    let mut out = SampledPrompt {
        ids: Vec::with_capacity(t_len),
        log_probs: Vec::with_capacity(t_len),
        q_values: Vec::with_capacity(t_len),
        logits: Vec::with_capacity(t_len),
    };
    for step in 0..t_len {
        let q = policy.q_values(ctx, &out.ids)?;
        let dist = cfg.step_distribution(&q, step, &out.ids)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = dist[dist.len() - 1];
        for &(tok, lp) in &dist {
            acc += lp.exp();
            if u < acc {
                chosen = (tok, lp);
                break;
            }
        }
        out.ids.push(chosen.0);
        out.log_probs.push(chosen.1);
        out.logits.push(q.iter().map(|v| v + cfg.logit_bias).collect());
        out.q_values.push(q);
    }
    Ok(out)
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_prompt(
    policy: &Policy,
    ctx: &ConditioningContext,
    mask: Option<&dyn ActionMask>,
) -> Result<Vec<TokenId>> {
    let mut ids = Vec::with_capacity(policy.prompt_length());
    for step in 0..policy.prompt_length() {
        let q = policy.q_values(ctx, &ids)?;
        let next = match mask {
            None => nn::argmax(&q) as TokenId,
            Some(m) => {
                let mut allowed = m.allowed(step, &ids);
                allowed.retain(|&t| (t as usize) < q.len());
                allowed.sort_unstable();
                let mut best: Option<TokenId> = None;
                for t in allowed {
                    if best.is_none_or(|b| q[t as usize] > q[b as usize]) {
                        best = Some(t);
                    }
                }
                best.ok_or(Error::EmptyActionSet(step))?
            }
        };
        ids.push(next);
    }
    Ok(ids)
}
