//! On-policy soft Q-learning.
//!
//! Each sampled prompt is an episode of `T` steps with a single terminal
//! reward and discount 1. The online network regresses `Q(s_t, z_t)` onto
//! `V_target(s_{t+1})` for `t < T` and onto the terminal reward at `t = T`,
//! where `V(s) = τ · log Σ_a exp(Q(s, a) / τ)`. Only adapter parameters are
//! trained; the target adapter trails the online one by Polyak averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::policy::{ConditioningContext, Policy};
use crate::text::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    /// Polyak rate β for the target adapter.
    pub target_rate: f64,
    /// Shared by sampling and the soft Bellman backup.
    pub temperature: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            target_rate: 1e-3,
            temperature: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(Error::InvalidConfig("target_rate must lie in (0, 1]".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &LearnerConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// One sampled prompt with its terminal training reward.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub ctx: ConditioningContext,
    pub ids: Vec<TokenId>,
    /// Online Q-values recorded while sampling.
    pub q_values: Vec<Vec<f64>>,
    pub terminal_reward: f64,
}

#[derive(Debug, Clone)]
pub struct LearnerState {
    pub online: Policy,
    pub target: Policy,
    pub config: LearnerConfig,
    adam: Adam,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

impl LearnerState {
    pub fn new(policy: Policy, config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(policy.adapter().len());
        Ok(Self {
            target: policy.clone(),
            online: policy,
            config,
            adam,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    /// Loss, gradient and parameter update in one call.
    pub fn train_on(&mut self, trajs: &[Trajectory]) -> Result<f64> {
        let out = sql_loss(trajs, self)?;
        step(self, &out.gradient)?;
        Ok(out.loss)
    }
}

/// `τ · log Σ_a exp(q_a / τ)`
pub fn soft_value(q: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = q.iter().map(|v| v / temperature).collect();
    temperature * nn::logsumexp(&scaled)
}

fn check_trajectory(traj: &Trajectory, policy: &Policy) -> Result<()> {
    if traj.ids.len() != policy.prompt_length() {
        return Err(Error::ShapeMismatch(format!(
            "trajectory has {} steps, policy expects {}",
            traj.ids.len(),
            policy.prompt_length()
        )));
    }
    // Validates the longest prefix the backup will encode.
    policy.features(&traj.ctx, &traj.ids[..traj.ids.len() - 1])?;
    Ok(())
}

fn step_features(policy: &Policy, traj: &Trajectory) -> Vec<Vec<f64>> {
    (0..traj.ids.len())
        .map(|t| policy.features_unchecked(&traj.ctx, &traj.ids[..t]))
        .collect()
}

fn targets_from_features(feats: &[Vec<f64>], target: &Policy, reward: f64, temperature: f64) -> Vec<f64> {
    let t_len = feats.len();
    let mut out: Vec<f64> = feats[1..]
        .iter()
        .map(|h| soft_value(&target.q_from_features(h), temperature))
        .collect();
    debug_assert_eq!(out.len(), t_len - 1);
    out.push(reward);
    out
}

/// Per-step regression targets; no gradient flows through them.
pub fn bellman_targets(traj: &Trajectory, target_policy: &Policy, temperature: f64) -> Result<Vec<f64>> {
    check_trajectory(traj, target_policy)?;
    let feats = step_features(target_policy, traj);
    Ok(targets_from_features(&feats, target_policy, traj.terminal_reward, temperature))
}

/// Mean over (trajectory, step) of `½ (Q_online(s_t, z_t) − target_t)²` and
/// its gradient with respect to the online adapter.
pub fn sql_loss(trajs: &[Trajectory], learner: &LearnerState) -> Result<LossOutput> {
    if trajs.is_empty() {
        return Err(Error::InvalidConfig("sql_loss needs at least one trajectory".into()));
    }
    let online = &learner.online;
    let n_terms: usize = trajs.iter().map(|t| t.ids.len()).sum();
    let norm = 1.0 / n_terms as f64;
    let mut gradient = vec![0.0; online.adapter().len()];
    let mut loss = 0.0;
    for traj in trajs {
        check_trajectory(traj, online)?;
        let feats = step_features(online, traj);
        let targets = targets_from_features(&feats, &learner.target, traj.terminal_reward, learner.config.temperature);
        for (t, h) in feats.iter().enumerate() {
            let action = traj.ids[t];
            let acts = online.adapter().forward(h);
            let head = online.encoder().head_row(action);
            let q = nn::dot(head, &acts.output);
            let residual = q - targets[t];
            loss += 0.5 * residual * residual * norm;
            let coeff = residual * norm;
            if coeff != 0.0 {
                let d_out: Vec<f64> = head.iter().map(|e| coeff * e).collect();
                online.adapter().backward(h, &acts, &d_out, &mut gradient);
            }
        }
    }
    Ok(LossOutput { loss, gradient })
}

/// Adam step on the online adapter, then Polyak-average the target adapter.
pub fn step(learner: &mut LearnerState, gradient: &[f64]) -> Result<()> {
    let n = learner.online.adapter().len();
    if gradient.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries, adapter has {n}",
            gradient.len()
        )));
    }
    let cfg = learner.config.clone();
    learner
        .adam
        .update(learner.online.adapter_mut().params_mut(), gradient, &cfg);
    let beta = cfg.target_rate;
    let online = learner.online.adapter().params().to_vec();
    for (t, o) in learner.target.adapter_mut().params_mut().iter_mut().zip(online) {
        *t = (1.0 - beta) * *t + beta * o;
    }
    learner.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Adapter, PolicyConfig};

    fn tiny_policy(vocab: usize, t: usize, hidden: usize, seed: u64) -> Policy {
        Policy::new(PolicyConfig {
            vocab_size: vocab,
            prompt_length: t,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            adapter_hidden: hidden,
            adapter_init_scale: 1.0,
            max_context: 8,
            seed,
            ..PolicyConfig::default()
        })
        .unwrap()
    }

    fn traj(policy: &Policy, ids: Vec<TokenId>, reward: f64) -> Trajectory {
        Trajectory {
            ctx: policy.placeholder_context(),
            ids,
            q_values: vec![],
            terminal_reward: reward,
        }
    }

    #[test]
    fn soft_value_cases() {
        assert!((soft_value(&[0.0, 0.0], 1.0) - 2f64.ln()).abs() < 1e-12);
        for tau in [0.1, 1.0, 7.0] {
            assert!((soft_value(&[5.0], tau) - 5.0).abs() < 1e-12);
        }
        // 0.5 * ln(e^2 + e^4 + e^6) from 30-digit arithmetic: 3.07146581424994976...
        assert!((soft_value(&[1.0, 2.0, 3.0], 0.5) - 3.071_465_814_249_95).abs() < 1e-12);
    }

    #[test]
    fn single_step_target_is_reward() {
        let p = tiny_policy(4, 1, 3, 0);
        let targets = bellman_targets(&traj(&p, vec![2], 1.75), &p, 1.0).unwrap();
        assert_eq!(targets, vec![1.75]);
    }

    #[test]
    fn zero_q_target_bootstraps_ln_vocab() {
        let mut p = tiny_policy(4, 3, 3, 0);
        p.set_adapter(Adapter::zeros(8, 3)).unwrap();
        let targets = bellman_targets(&traj(&p, vec![0, 3, 1], 0.0), &p, 1.0).unwrap();
        assert!((targets[0] - 4f64.ln()).abs() < 1e-12);
        assert!((targets[1] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(targets[2], 0.0);
        assert!(targets.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn loss_hand_case() {
        let mut p = tiny_policy(4, 1, 3, 0);
        p.set_adapter(Adapter::zeros(8, 3)).unwrap();
        let learner = LearnerState::new(p.clone(), LearnerConfig::default()).unwrap();
        let out = sql_loss(&[traj(&p, vec![1], 2.0)], &learner).unwrap();
        assert!((out.loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_vanishes_at_fixed_point() {
        let p = tiny_policy(5, 2, 4, 3);
        let learner = LearnerState::new(p.clone(), LearnerConfig::default()).unwrap();
        // T = 1 with reward equal to the current Q of the chosen action.
        let p1 = tiny_policy(5, 1, 4, 3);
        let l1 = LearnerState::new(p1.clone(), LearnerConfig::default()).unwrap();
        let q = p1.q_values(&p1.placeholder_context(), &[]).unwrap();
        let out = sql_loss(&[traj(&p1, vec![2], q[2])], &l1).unwrap();
        assert!(out.loss.abs() < 1e-20);
        assert!(out.gradient.iter().all(|g| g.abs() < 1e-12));
        // T = 2: first target is V_target of the next state, which the online
        // net matches when online == target and Q(s1, z1) equals it.
        let ctx = p.placeholder_context();
        let v2 = soft_value(&p.q_values(&ctx, &[0]).unwrap(), 1.0);
        let q1 = p.q_values(&ctx, &[]).unwrap()[0];
        let q2 = p.q_values(&ctx, &[0]).unwrap()[3];
        let out = sql_loss(&[traj(&p, vec![0, 3], q2)], &learner).unwrap();
        assert!((out.loss - 0.25 * (q1 - v2).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative() {
        let p = tiny_policy(6, 3, 4, 1);
        let learner = LearnerState::new(p.clone(), LearnerConfig::default()).unwrap();
        for r in [-3.0, 0.0, 4.0] {
            let out = sql_loss(&[traj(&p, vec![1, 2, 3], r), traj(&p, vec![5, 5, 0], -r)], &learner).unwrap();
            assert!(out.loss >= 0.0);
        }
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        // 8*25 + 25 + 25*8 + 8 = 433 parameters.
        let p = tiny_policy(6, 3, 25, 5);
        let mut learner = LearnerState::new(p.clone(), LearnerConfig::default()).unwrap();
        learner.target.adapter_mut().params_mut()[0] += 0.3;
        let trajs = vec![traj(&p, vec![1, 4, 2], 1.5), traj(&p, vec![0, 0, 5], -0.7)];
        let out = sql_loss(&trajs, &learner).unwrap();
        let eps = 1e-5;
        for i in 0..out.gradient.len() {
            let mut plus = learner.clone();
            plus.online.adapter_mut().params_mut()[i] += eps;
            let mut minus = learner.clone();
            minus.online.adapter_mut().params_mut()[i] -= eps;
            let fd = (sql_loss(&trajs, &plus).unwrap().loss - sql_loss(&trajs, &minus).unwrap().loss) / (2.0 * eps);
            let a = out.gradient[i];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-7);
            assert!(err <= 1e-4, "param {i}: fd {fd} analytic {a}");
        }
    }

    #[test]
    fn zero_gradient_step_is_pure_polyak() {
        let p = tiny_policy(4, 2, 3, 0);
        let mut learner = LearnerState::new(p, LearnerConfig::default()).unwrap();
        for v in learner.target.adapter_mut().params_mut() {
            *v += 1.0;
        }
        let online_before = learner.online.adapter().params().to_vec();
        let target_before = learner.target.adapter().params().to_vec();
        let zeros = vec![0.0; online_before.len()];
        step(&mut learner, &zeros).unwrap();
        assert_eq!(learner.online.adapter().params(), &online_before[..]);
        for ((t, t0), o) in learner.target.adapter().params().iter().zip(&target_before).zip(&online_before) {
            let expected = t0 + 1e-3 * (o - t0);
            assert!((t - expected).abs() < 1e-12);
        }
        assert_eq!(learner.step_count(), 1);
    }

    #[test]
    fn unit_rate_copies_online() {
        let p = tiny_policy(4, 2, 3, 0);
        let cfg = LearnerConfig {
            target_rate: 1.0,
            learning_rate: 0.01,
            ..LearnerConfig::default()
        };
        let mut learner = LearnerState::new(p, cfg).unwrap();
        let g: Vec<f64> = (0..learner.online.adapter().len()).map(|i| (i as f64).sin()).collect();
        step(&mut learner, &g).unwrap();
        assert_eq!(learner.online.adapter().params(), learner.target.adapter().params());
    }

    #[test]
    fn constant_gradient_drifts_one_learning_rate_per_step() {
        // Closed form with bias correction: m_hat = g, v_hat = g^2, so every
        // step moves by lr * |g| / (|g| + eps).
        let cfg = LearnerConfig {
            learning_rate: 1e-3,
            ..LearnerConfig::default()
        };
        let mut adam = Adam::new(2);
        let mut params = vec![0.0, 0.0];
        let grad = [0.5, -2.0];
        let mut prev = params.clone();
        for k in 1..=500 {
            adam.update(&mut params, &grad, &cfg);
            for i in 0..2 {
                let delta = params[i] - prev[i];
                let expected = -cfg.learning_rate * grad[i].signum() * grad[i].abs() / (grad[i].abs() + cfg.epsilon);
                assert!((delta - expected).abs() < 1e-12, "step {k}: {delta} vs {expected}");
            }
            prev = params.clone();
        }
        assert!((params[0] + 0.5).abs() < 1e-6);
        assert!((params[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn target_trail_bound_on_scalar_parameters() {
        // trail_n is the β-weighted average of online iterates started from
        // w_0; the target may differ from it by at most (1-β)^n |t_0 - w_0|.
        let p = tiny_policy(3, 1, 1, 0);
        let cfg = LearnerConfig {
            target_rate: 0.05,
            learning_rate: 0.01,
            ..LearnerConfig::default()
        };
        let mut learner = LearnerState::new(p, cfg).unwrap();
        let n_params = learner.online.adapter().len();
        for v in learner.target.adapter_mut().params_mut() {
            *v += 2.0;
        }
        let gap0: f64 = 2.0;
        let mut trail = learner.online.adapter().params().to_vec();
        for n in 1..=200 {
            let g: Vec<f64> = (0..n_params).map(|i| ((n * 7 + i) as f64).cos()).collect();
            step(&mut learner, &g).unwrap();
            for (tr, o) in trail.iter_mut().zip(learner.online.adapter().params()) {
                *tr = 0.95 * *tr + 0.05 * o;
            }
            let dist = learner
                .target
                .adapter()
                .params()
                .iter()
                .zip(&trail)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dist <= 0.95f64.powi(n as i32) * gap0 + 1e-9);
        }
    }

    #[test]
    fn bandit_converges_to_enumerated_optimum() {
        // |V| = 4, T = 2, deterministic reward; optimum found by enumeration.
        let reward = |ids: &[TokenId]| -> f64 {
            let table = [[0.1, 0.4, 0.0, 0.2], [0.3, 0.2, 0.9, 0.1], [0.0, 0.5, 0.2, 0.6], [0.2, 0.1, 0.3, 0.0]];
            table[ids[0] as usize][ids[1] as usize]
        };
        let mut best = (vec![0, 0], f64::MIN);
        for a in 0..4 {
            for b in 0..4 {
                if reward(&[a, b]) > best.1 {
                    best = (vec![a, b], reward(&[a, b]));
                }
            }
        }
        let mut successes = 0;
        for seed in 0..5 {
            let policy = Policy::new(PolicyConfig {
                vocab_size: 4,
                prompt_length: 2,
                model_dim: 16,
                num_heads: 2,
                ffn_dim: 16,
                adapter_hidden: 32,
                max_context: 8,
                seed,
                ..PolicyConfig::default()
            })
            .unwrap();
            let cfg = LearnerConfig {
                learning_rate: 3e-3,
                target_rate: 0.05,
                ..LearnerConfig::default()
            };
            let mut learner = LearnerState::new(policy, cfg).unwrap();
            let ctx = learner.online.placeholder_context();
            let sampling = crate::policy::SamplingConfig::default();
            let mut rng = <rand_chacha::ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(seed);
            let mut reached = false;
            for _ in 0..2000 {
                let mut batch = Vec::new();
                for _ in 0..8 {
                    let s = crate::policy::sample_prompt_with(&learner.online, &ctx, &sampling, &mut rng).unwrap();
                    let r = reward(&s.ids) * 10.0;
                    batch.push(Trajectory {
                        ctx: ctx.clone(),
                        ids: s.ids,
                        q_values: s.q_values,
                        terminal_reward: r,
                    });
                }
                learner.train_on(&batch).unwrap();
                if learner.step_count() % 100 == 0
                    && crate::policy::greedy_prompt(&learner.online, &ctx, None).unwrap() == best.0
                {
                    reached = true;
                    break;
                }
            }
            successes += reached as usize;
        }
        assert!(successes >= 4, "only {successes}/5 seeds reached the optimum");
    }
}
