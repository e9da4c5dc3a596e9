//! Reward composition and stabilization.
//!
//! Pipelines, in order:
//! - classification: class probabilities → piecewise (or plain gap) reward,
//!   averaged over the few-shot examples → × global scale → z-score across
//!   the prompts of the batch;
//! - style transfer: content and style scores → combined score in [0, 1] →
//!   linear shaping → z-score across the prompts sampled for each input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor on the standard deviation used by [`zscore`].
pub const ZSCORE_EPS: f64 = 1e-6;

/// `(r − mean) / max(std, ε)` with the population standard deviation.
/// Singleton and constant lists map to zeros.
pub fn zscore(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std <= ZSCORE_EPS {
        return vec![0.0; n];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Label probability minus the best competing class probability.
pub fn classification_gap(probs: &[f64], class: usize) -> f64 {
    let rival = probs
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != class)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    let rival = if rival.is_finite() { rival } else { 0.0 };
    probs[class] - rival
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PiecewiseConfig {
    /// Multiplier for incorrect predictions.
    pub lambda_incorrect: f64,
    /// Multiplier for correct predictions.
    pub lambda_correct: f64,
    pub global_scale: f64,
}

impl Default for PiecewiseConfig {
    fn default() -> Self {
        Self {
            lambda_incorrect: 180.0,
            lambda_correct: 200.0,
            global_scale: 5.0,
        }
    }
}

impl PiecewiseConfig {
    pub fn unscaled() -> Self {
        Self {
            global_scale: 1.0,
            ..Self::default()
        }
    }
}

/// `λ_incorrect^(1−Correct) · λ_correct^Correct · Gap · scale`, with
/// `Correct = 1[Gap > 0]`; ties count as incorrect.
pub fn piecewise_reward(probs: &[f64], class: usize, cfg: &PiecewiseConfig) -> f64 {
    let gap = classification_gap(probs, class);
    let lambda = if gap > 0.0 {
        cfg.lambda_correct
    } else {
        cfg.lambda_incorrect
    };
    lambda * gap * cfg.global_scale
}

/// Per-example classification reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassificationReward {
    Piecewise(PiecewiseConfig),
    /// The gap alone, times a scale; the ablation baseline.
    Gap { scale: f64 },
}

impl Default for ClassificationReward {
    fn default() -> Self {
        Self::Piecewise(PiecewiseConfig::default())
    }
}

impl ClassificationReward {
    pub fn reward(&self, probs: &[f64], class: usize) -> f64 {
        match self {
            Self::Piecewise(cfg) => piecewise_reward(probs, class, cfg),
            Self::Gap { scale } => classification_gap(probs, class) * scale,
        }
    }
}

/// `(content + style) / 2`, so the combined score stays in [0, 1].
pub fn tst_reward(content: f64, style: f64) -> Result<f64> {
    const TOL: f64 = 1e-6;
    for (name, v) in [("content", content), ("style", style)] {
        if !(v >= -TOL && v <= 1.0 + TOL) {
            return Err(Error::OutOfRange(format!("{name} score {v} outside [0, 1]")));
        }
    }
    Ok((content + style) / 2.0)
}

/// Affine map from `[from_lo, from_hi]` to `[to_lo, to_hi]`; extrapolates outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingMap {
    pub from: (f64, f64),
    pub to: (f64, f64),
}

impl ShapingMap {
    pub fn new(from: (f64, f64), to: (f64, f64)) -> Result<Self> {
        if !(from.0 < from.1 && to.0 < to.1) {
            return Err(Error::InvalidConfig("shaping intervals must be increasing".into()));
        }
        Ok(Self { from, to })
    }

    /// `[0, 1] → [−20, 80]`, the style-transfer default.
    pub fn style_transfer() -> Self {
        Self {
            from: (0.0, 1.0),
            to: (-20.0, 80.0),
        }
    }

    pub fn inverse(&self) -> Self {
        Self {
            from: self.to,
            to: self.from,
        }
    }

    pub fn apply(&self, r: f64) -> f64 {
        shape(r, self)
    }
}

pub fn shape(r: f64, map: &ShapingMap) -> f64 {
    let (a, b) = map.from;
    let (c, d) = map.to;
    c + (r - a) * (d - c) / (b - a)
}

/// One (input, prompt) cell of a training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardEntry {
    pub input: usize,
    pub prompt: usize,
    pub raw: f64,
    /// After scaling or shaping.
    pub shaped: f64,
    /// After z-scoring within the group (equal to `shaped` when disabled).
    pub stabilized: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardBatch {
    pub entries: Vec<RewardEntry>,
}

impl RewardBatch {
    /// Builds a batch from `(input, prompt, raw)` cells, applies `transform`,
    /// then optionally z-scores per input group.
    pub fn stabilize<F>(cells: &[(usize, usize, f64)], transform: F, use_zscore: bool) -> Self
    where
        F: Fn(f64) -> f64,
    {
        let mut entries: Vec<RewardEntry> = cells
            .iter()
            .map(|&(input, prompt, raw)| {
                let shaped = transform(raw);
                RewardEntry {
                    input,
                    prompt,
                    raw,
                    shaped,
                    stabilized: shaped,
                }
            })
            .collect();
        if use_zscore {
            let mut groups: Vec<usize> = entries.iter().map(|e| e.input).collect();
            groups.sort_unstable();
            groups.dedup();
            for g in groups {
                let idx: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].input == g).collect();
                let z = zscore(&idx.iter().map(|&i| entries[i].shaped).collect::<Vec<_>>());
                for (i, zi) in idx.into_iter().zip(z) {
                    entries[i].stabilized = zi;
                }
            }
        }
        Self { entries }
    }

    pub fn stabilized(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.stabilized).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zscore_hand_case() {
        // mean 2, population std sqrt(2/3)
        let s = (2.0f64 / 3.0).sqrt();
        let z = zscore(&[1.0, 2.0, 3.0]);
        assert!(close(z[0], -1.0 / s, 1e-12) && close(z[1], 0.0, 1e-12) && close(z[2], 1.0 / s, 1e-12));
        assert!(close(z[2], 1.2247, 1e-4));
    }

    #[test]
    fn zscore_degenerate_inputs() {
        assert_eq!(zscore(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
        assert_eq!(zscore(&[3.0]), vec![0.0]);
        assert!(zscore(&[]).is_empty());
    }

    #[test]
    fn gap_cases() {
        assert!(close(classification_gap(&[0.7, 0.3], 0), 0.4, 1e-12));
        assert!(close(classification_gap(&[0.3, 0.7], 0), -0.4, 1e-12));
        for c in 0..4 {
            assert_eq!(classification_gap(&[0.25; 4], c), 0.0);
        }
    }

    #[test]
    fn piecewise_cases() {
        let cfg = PiecewiseConfig::unscaled();
        assert!(close(piecewise_reward(&[0.7, 0.3], 0, &cfg), 80.0, 1e-9));
        assert!(close(piecewise_reward(&[0.3, 0.7], 0, &cfg), -72.0, 1e-9));
        assert_eq!(piecewise_reward(&[0.5, 0.5], 1, &cfg), 0.0);
        assert!(close(piecewise_reward(&[0.7, 0.3], 0, &PiecewiseConfig::default()), 400.0, 1e-9));
    }

    #[test]
    fn piecewise_slope_jump_at_zero() {
        let cfg = PiecewiseConfig::default();
        let r = |g: f64| piecewise_reward(&[(1.0 + g) / 2.0, (1.0 - g) / 2.0], 0, &cfg);
        let h = 1e-6;
        let right = (r(2.0 * h) - r(h)) / h;
        let left = (r(-h) - r(-2.0 * h)) / h;
        assert!(close(right - left, (cfg.lambda_correct - cfg.lambda_incorrect) * cfg.global_scale, 1e-3));
        assert!(r(1e-12).abs() < 1e-6 && r(-1e-12).abs() < 1e-6);
    }

    #[test]
    fn tst_cases() {
        assert_eq!(tst_reward(1.0, 1.0).unwrap(), 1.0);
        assert!(close(tst_reward(0.6, 0.8).unwrap(), 0.7, 1e-12));
        assert_eq!(tst_reward(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(tst_reward(1.1, 0.5), Err(Error::OutOfRange(_))));
        assert!(tst_reward(-0.01, 0.5).is_err());
    }

    #[test]
    fn shaping_cases() {
        let m = ShapingMap::style_transfer();
        assert_eq!(shape(0.0, &m), -20.0);
        assert_eq!(shape(1.0, &m), 80.0);
        assert_eq!(shape(0.5, &m), 30.0);
        assert_eq!(shape(1.5, &m), 130.0);
        let ablation = ShapingMap::new((50.0, 100.0), (-50.0, 50.0)).unwrap();
        assert_eq!(ablation.apply(75.0), 0.0);
        assert!(ShapingMap::new((1.0, 0.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn batch_zscores_per_input() {
        let cells = [(0, 0, 1.0), (0, 1, 3.0), (1, 2, 10.0), (1, 3, 30.0), (1, 4, 20.0)];
        let b = RewardBatch::stabilize(&cells, |r| r * 2.0, true);
        let s = b.stabilized();
        assert!(close(s[0], -1.0, 1e-12) && close(s[1], 1.0, 1e-12));
        assert!(close(s[2] + s[3] + s[4], 0.0, 1e-12));
        assert_eq!(b.entries[3].shaped, 60.0);
        let plain = RewardBatch::stabilize(&cells, |r| r, false);
        assert_eq!(plain.stabilized(), vec![1.0, 3.0, 10.0, 30.0, 20.0]);
    }

    proptest! {
        #[test]
        fn zscore_mean_zero_unit_variance(v in proptest::collection::vec(-1e3f64..1e3, 2..40)) {
            let z = zscore(&v);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            if std > ZSCORE_EPS {
                let zm = z.iter().sum::<f64>() / z.len() as f64;
                let zv = z.iter().map(|x| (x - zm).powi(2)).sum::<f64>() / z.len() as f64;
                prop_assert!(zm.abs() < 1e-9);
                prop_assert!((zv - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn zscore_shift_and_scale_invariance(v in proptest::collection::vec(-100f64..100.0, 2..20),
                                             shift in -50f64..50.0, scale in 0.1f64..10.0) {
            let z = zscore(&v);
            let moved: Vec<f64> = v.iter().map(|x| x * scale + shift).collect();
            let z2 = zscore(&moved);
            for (a, b) in z.iter().zip(&z2) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(z[i] <= z[j]);
                    }
                }
            }
        }

        #[test]
        fn shape_inverse_is_identity(r in -100f64..100.0) {
            for m in [ShapingMap::style_transfer(), ShapingMap::new((50.0, 100.0), (-50.0, 50.0)).unwrap()] {
                prop_assert!((m.inverse().apply(m.apply(r)) - r).abs() <= 1e-12 * r.abs().max(1.0));
            }
        }

        #[test]
        fn piecewise_increasing_on_each_piece(g1 in -1f64..1.0, g2 in -1f64..1.0) {
            let cfg = PiecewiseConfig::default();
            let r = |g: f64| piecewise_reward(&[(1.0 + g) / 2.0, (1.0 - g) / 2.0], 0, &cfg);
            let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
            if hi - lo > 1e-9 && (lo > 0.0 || hi <= 0.0) {
                prop_assert!(r(lo) < r(hi));
            }
        }
    }
}
