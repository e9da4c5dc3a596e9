use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::text::{Example, Prompt, TokenId};

#[derive(Debug, Clone, PartialEq)]
pub struct RandomSearchResult {
    pub best: Prompt,
    /// Mean reward of `best` over the examples.
    pub best_reward: f64,
    /// `(prompt, example)` reward queries spent.
    pub evaluations: usize,
}

/// Uniform random search over length-`prompt_length` prompts, spending at
/// most `budget` `(prompt, example)` queries. Ties keep the earlier prompt.
pub fn random_search(
    env: &dyn Environment,
    examples: &[Example],
    prompt_length: usize,
    budget: usize,
    seed: u64,
) -> Result<RandomSearchResult> {
    let per_prompt = examples.len();
    if per_prompt == 0 || budget < per_prompt {
        return Err(Error::InvalidConfig("budget must cover at least one prompt on every example".into()));
    }
    let v = env.vocab().len() as TokenId;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4a5d_0b5e_a4c4_0001);
    let mut best: Option<(Prompt, f64)> = None;
    let mut spent = 0;
    while spent + per_prompt <= budget {
        let ids: Vec<TokenId> = (0..prompt_length).map(|_| rng.random_range(0..v)).collect();
        let p = Prompt::new(ids, env.vocab())?;
        let r = env.evaluate(std::slice::from_ref(&p), examples, rng.random())?.rewards.mean();
        spent += per_prompt;
        if best.as_ref().is_none_or(|(_, b)| r > *b) {
            best = Some((p, r));
        }
    }
    let (best, best_reward) = best.expect("at least one prompt evaluated");
    Ok(RandomSearchResult {
        best,
        best_reward,
        evaluations: spent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SyntheticOracleEnv;

    #[test]
    fn exhausts_small_spaces_and_respects_budget() {
        let (env, ex) = SyntheticOracleEnv::generate(3, 2, &[1.0], 0).unwrap();
        let r = random_search(&env, &ex, 2, 200, 1).unwrap();
        assert_eq!(r.best_reward, 1.0);
        assert_eq!(&r.best, env.target());
        assert_eq!(r.evaluations, 200);
        let (env3, ex3) = SyntheticOracleEnv::generate(3, 2, &[1.0, 1.0, 1.0], 0).unwrap();
        assert_eq!(random_search(&env3, &ex3, 2, 10, 1).unwrap().evaluations, 9);
        assert!(random_search(&env3, &ex3, 2, 2, 1).is_err());
    }
}
