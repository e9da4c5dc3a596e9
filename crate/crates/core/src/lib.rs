//! Discrete prompt optimization with on-policy soft Q-learning.
//!
//! A frozen seeded encoder plus a small trainable adapter forms the policy
//! over prompt tokens. Prompts are scored by black-box environments and the
//! adapter is trained on the stabilized rewards.

pub mod env;
pub mod error;
pub mod harness;
pub mod learner;
pub mod nn;
pub mod policy;
pub mod rewards;
pub mod text;

pub use env::{bootstrap_reward, class_probabilities, evaluate, Environment, Evaluation, RewardMatrix, TaskKind};
pub use error::{Error, Result};
pub use learner::{sql_loss, step, LearnerConfig, LearnerState, LossOutput, Trajectory};
pub use policy::{sample_prompt, Checkpoint, ConditioningContext, Policy, PolicyConfig, SamplingConfig};
pub use rewards::{
    classification_gap, piecewise_reward, shape, tst_reward, zscore, ClassificationReward, PiecewiseConfig, RewardBatch,
    ShapingMap,
};
pub use text::{render, Example, Prompt, Template, TokenId, Verbalizers, Vocabulary};
