//! Domain discriminator: masked mean pooling of encoder states followed by
//! `s = tanh(h W1 + b1) W2 + b2`.

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamStore};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

use super::backbone::EncoderOutput;
use super::config::ModelConfig;
use super::experts::argmax;
use super::Model;

pub const W1: &str = "disc.w1";
pub const B1: &str = "disc.b1";
pub const W2: &str = "disc.w2";
pub const B2: &str = "disc.b2";

pub(super) fn init_params<T: Scalar>(cfg: &ModelConfig, p: &mut ParamStore<T>, rng: &mut RngStream) {
    let (d, k) = (cfg.model_dim, cfg.num_experts);
    p.insert(W1, xavier_uniform(d, d, rng));
    p.insert(B1, Tensor::zeros(&[d]));
    p.insert(W2, xavier_uniform(d, k, rng));
    p.insert(B2, Tensor::zeros(&[k]));
}

/// Sentence features: mean of `h` over non-pad positions, `(batch, d)`.
pub fn pool<T: Scalar>(g: &mut Graph<T>, enc: &EncoderOutput) -> Result<Var> {
    g.masked_mean_pool(enc.h, &enc.valid, enc.batch)
}

/// Category scores `(batch, K)` for pooled features `(batch, d)`.
pub fn score<T: Scalar>(g: &mut Graph<T>, params: &ParamStore<T>, feature: Var) -> Result<Var> {
    let w1 = g.bind(params, W1)?;
    let d = g.value(w1).shape()[0];
    let fd = g.value(feature).as_matrix_dims().1;
    if fd != d {
        return Err(Error::shape("discriminator score", g.shape(feature), &[d]));
    }
    let b1 = g.bind(params, B1)?;
    let w2 = g.bind(params, W2)?;
    let b2 = g.bind(params, B2)?;
    let h = g.linear(feature, w1, b1)?;
    let h = g.tanh(h);
    g.linear(h, w2, b2)
}

/// Multi-class cross-entropy of the scores' softmax against hard labels.
pub fn distillation_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    feature: Var,
    labels: &[usize],
) -> Result<Var> {
    let s = score(g, params, feature)?;
    g.cross_entropy(s, labels, None)
}

impl<T: Scalar> Model<T> {
    /// Pooled encoder features of every sentence, `(n, d)`, computed in
    /// batches of `batch_size` with the encoder in eval mode.
    pub fn sentence_features(&self, src: &[Vec<usize>], batch_size: usize) -> Result<Tensor<T>> {
        let d = self.config.model_dim;
        let mut data = Vec::with_capacity(src.len() * d);
        for chunk in src.chunks(batch_size.max(1)) {
            let mut g = Graph::inference();
            let enc = self.encode(&mut g, chunk, None)?;
            let f = pool(&mut g, &enc)?;
            data.extend_from_slice(g.value(f).data());
        }
        Tensor::new(vec![src.len(), d], data)
    }

    /// Category scores `(n, K)` for precomputed features.
    pub fn category_scores(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.has_discriminator() {
            return Err(Error::StageIncomplete("discriminator"));
        }
        let mut g = Graph::inference();
        let f = g.constant(features.clone());
        let s = score(&mut g, &self.params, f)?;
        Ok(g.value(s).clone())
    }

    /// Category scores for raw source sentences, as `f64` rows.
    pub fn score_sentences(&self, src: &[Vec<usize>], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let f = self.sentence_features(src, batch_size)?;
        let s = self.category_scores(&f)?;
        let (n, _) = s.as_matrix_dims();
        Ok((0..n)
            .map(|i| s.row(i).iter().map(|v| v.to_f64_lossy()).collect())
            .collect())
    }

    /// Highest-scoring category (ties to the lowest index) and the scores.
    pub fn classify(&self, src: &[usize]) -> Result<(usize, Vec<f64>)> {
        let s = self.score_sentences(&[src.to_vec()], 1)?.remove(0);
        Ok((argmax(&s), s))
    }
}
