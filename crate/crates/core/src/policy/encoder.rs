//! Frozen causal self-attention encoder with seeded weights.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{self, Matrix};
use crate::text::TokenId;

use super::PolicyConfig;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ff_in: Matrix,
    ff_out: Matrix,
}

const CACHE_CAPACITY: usize = 1 << 16;
const SHARED_HEAD_SCALE: f64 = 1.0;

/// Memo of recent contexts. Outputs are a pure function of the ids, so the
/// cache never changes results; it is dropped wholesale when full.
#[derive(Debug, Default)]
struct FeatureCache(Mutex<HashMap<Vec<TokenId>, Arc<Vec<f64>>>>);

impl Clone for FeatureCache {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl PartialEq for FeatureCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Frozen encoder plus the frozen output head. Row `vocab_size` of the token
/// embeddings is the placeholder token, which the head never emits.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    token_emb: Matrix,
    pos_emb: Matrix,
    head: Matrix,
    layers: Vec<Layer>,
    num_heads: usize,
    vocab_size: usize,
    cache: FeatureCache,
}

impl Encoder {
    pub fn seeded(cfg: &PolicyConfig) -> Self {
        // Offset keeps encoder draws independent of the adapter init stream.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e4c0_de00_0001);
        let d = cfg.model_dim;
        let token_emb = Matrix::gaussian(cfg.vocab_size + 1, d, 1.0, &mut rng);
        let pos_emb = Matrix::gaussian(cfg.max_context, d, 1.0, &mut rng);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let layers = (0..cfg.num_layers)
            .map(|_| Layer {
                wq: Matrix::gaussian(d, d, inv(d), &mut rng),
                wk: Matrix::gaussian(d, d, inv(d), &mut rng),
                wv: Matrix::gaussian(d, d, inv(d), &mut rng),
                wo: Matrix::gaussian(d, d, inv(d), &mut rng),
                ff_in: Matrix::gaussian(cfg.ffn_dim, d, inv(d), &mut rng),
                ff_out: Matrix::gaussian(d, cfg.ffn_dim, inv(cfg.ffn_dim), &mut rng),
            })
            .collect();
        // The head is not tied to the embeddings: with tied rows, "repeat the
        // previous token" is a linear rule for the adapter and leaks across
        // positions. Its rows share one direction so a state can shift all
        // of its Q-values together.
        let mut head = Matrix::gaussian(cfg.vocab_size, d, 1.0, &mut rng);
        let shared = nn::gaussian_vec(d, SHARED_HEAD_SCALE, &mut rng);
        for r in 0..head.rows {
            for (x, s) in head.data[r * d..(r + 1) * d].iter_mut().zip(&shared) {
                *x += s;
            }
        }
        Self {
            token_emb,
            pos_emb,
            head,
            layers,
            num_heads: cfg.num_heads,
            vocab_size: cfg.vocab_size,
            cache: FeatureCache::default(),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.token_emb.cols
    }

    pub fn placeholder_id(&self) -> TokenId {
        self.vocab_size as TokenId
    }

    /// Output head row for `token`.
    pub fn head_row(&self, token: TokenId) -> &[f64] {
        self.head.row(token as usize)
    }

    /// `logits[v] = <head_row(v), x>` over the action vocabulary.
    pub fn head(&self, x: &[f64]) -> Vec<f64> {
        (0..self.vocab_size)
            .map(|v| nn::dot(self.head.row(v), x))
            .collect()
    }

    /// Final-layer hidden state at the last position of `ids`.
    pub fn last_hidden(&self, ids: &[TokenId]) -> Vec<f64> {
        if let Some(h) = self.cache.0.lock().expect("cache lock").get(ids) {
            return h.as_ref().clone();
        }
        let h = self.compute_last_hidden(ids);
        let mut cache = self.cache.0.lock().expect("cache lock");
        if cache.len() >= CACHE_CAPACITY {
            cache.clear();
        }
        cache.insert(ids.to_vec(), Arc::new(h.clone()));
        h
    }

    fn compute_last_hidden(&self, ids: &[TokenId]) -> Vec<f64> {
        debug_assert!(!ids.is_empty() && ids.len() <= self.pos_emb.rows);
        let d = self.model_dim();
        let mut xs: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(p, &id)| {
                let t = self.token_emb.row(id as usize);
                let pe = self.pos_emb.row(p);
                t.iter().zip(pe).map(|(a, b)| a + b).collect()
            })
            .collect();
        let head_dim = d / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        for layer in &self.layers {
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| nn::layer_norm(x)).collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|x| layer.wq.matvec(x)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|x| layer.wk.matvec(x)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|x| layer.wv.matvec(x)).collect();
            for i in 0..xs.len() {
                let mut mixed = vec![0.0; d];
                for h in 0..self.num_heads {
                    let r = h * head_dim..(h + 1) * head_dim;
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| nn::dot(&q[i][r.clone()], &k[j][r.clone()]) * scale)
                        .collect();
                    let w = nn::softmax(&scores);
                    for (j, wj) in w.iter().enumerate() {
                        for c in r.clone() {
                            mixed[c] += wj * v[j][c];
                        }
                    }
                }
                let out = layer.wo.matvec(&mixed);
                for (x, o) in xs[i].iter_mut().zip(out) {
                    *x += o;
                }
            }
            for x in xs.iter_mut() {
                let n = nn::layer_norm(x);
                let hidden: Vec<f64> = layer.ff_in.matvec(&n).into_iter().map(nn::gelu).collect();
                let out = layer.ff_out.matvec(&hidden);
                for (a, o) in x.iter_mut().zip(out) {
                    *a += o;
                }
            }
        }
        nn::layer_norm(xs.last().expect("non-empty context"))
    }

    /// Order-independent digest of every frozen weight, for invariance checks.
    pub fn fingerprint(&self) -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |m: &Matrix| {
            for v in &m.data {
                acc = (acc ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        };
        feed(&self.token_emb);
        feed(&self.pos_emb);
        feed(&self.head);
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.ff_in, &l.ff_out] {
                feed(m);
            }
        }
        acc
    }
}
