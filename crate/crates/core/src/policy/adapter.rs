//! The trainable one-hidden-layer adapter between the encoder and the head.
//!
//! `a = W2 · tanh(W1 · h + b1) + b2`, stored as one flat parameter vector
//! laid out as `[W1 (H×D), b1 (H), W2 (D×H), b2 (D)]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    model_dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AdapterActivations {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Adapter {
    pub fn param_count(model_dim: usize, hidden: usize) -> usize {
        2 * model_dim * hidden + hidden + model_dim
    }

    pub fn zeros(model_dim: usize, hidden: usize) -> Self {
        Self {
            model_dim,
            hidden,
            params: vec![0.0; Self::param_count(model_dim, hidden)],
        }
    }

    pub fn seeded<R: Rng>(model_dim: usize, hidden: usize, out_scale: f64, rng: &mut R) -> Self {
        let mut a = Self::zeros(model_dim, hidden);
        let w1 = nn::gaussian_vec(hidden * model_dim, 1.0 / (model_dim as f64).sqrt(), rng);
        let w2 = nn::gaussian_vec(model_dim * hidden, out_scale / (hidden as f64).sqrt(), rng);
        let (o1, _, o2, _) = a.offsets();
        a.params[o1..o1 + w1.len()].copy_from_slice(&w1);
        a.params[o2..o2 + w2.len()].copy_from_slice(&w2);
        a
    }

    pub fn from_params(model_dim: usize, hidden: usize, params: Vec<f64>) -> Option<Self> {
        (params.len() == Self::param_count(model_dim, hidden)).then_some(Self {
            model_dim,
            hidden,
            params,
        })
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let w1 = 0;
        let b1 = self.hidden * self.model_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.model_dim * self.hidden;
        (w1, b1, w2, b2)
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn forward(&self, h: &[f64]) -> AdapterActivations {
        let (o1, ob1, o2, ob2) = self.offsets();
        let (d, hd) = (self.model_dim, self.hidden);
        let p = &self.params;
        let hidden: Vec<f64> = (0..hd)
            .map(|j| (nn::dot(&p[o1 + j * d..o1 + (j + 1) * d], h) + p[ob1 + j]).tanh())
            .collect();
        let output = (0..d)
            .map(|i| nn::dot(&p[o2 + i * hd..o2 + (i + 1) * hd], &hidden) + p[ob2 + i])
            .collect();
        AdapterActivations { hidden, output }
    }

    /// Adds `dL/dθ` into `grad`, given the encoder features `h`, the cached
    /// activations, and `dL/da` for the adapter output.
    pub fn backward(&self, h: &[f64], acts: &AdapterActivations, d_out: &[f64], grad: &mut [f64]) {
        let (o1, ob1, o2, ob2) = self.offsets();
        let (d, hd) = (self.model_dim, self.hidden);
        let p = &self.params;
        let mut d_hidden = vec![0.0; hd];
        for i in 0..d {
            let g = d_out[i];
            if g == 0.0 {
                continue;
            }
            grad[ob2 + i] += g;
            let row = o2 + i * hd;
            for j in 0..hd {
                grad[row + j] += g * acts.hidden[j];
                d_hidden[j] += g * p[row + j];
            }
        }
        for j in 0..hd {
            let dpre = d_hidden[j] * (1.0 - acts.hidden[j] * acts.hidden[j]);
            if dpre == 0.0 {
                continue;
            }
            grad[ob1 + j] += dpre;
            let row = o1 + j * d;
            for k in 0..d {
                grad[row + k] += dpre * h[k];
            }
        }
    }
}
