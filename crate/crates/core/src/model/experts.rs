//! Expert adapters after every decoder layer and the routing schemes that
//! pick one of them per sentence.
//!
//! Each expert maps a decoder-layer output `z` to `FFN(LN(z)) + z`. The second
//! FFN projection starts at zero, so a fresh expert is exactly the identity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamStore};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

use super::backbone::{ffn, init_ln, layer_norm};
use super::config::ModelConfig;
use super::{Model, EXPERT_PREFIX};

pub(super) fn init_params<T: Scalar>(cfg: &ModelConfig, p: &mut ParamStore<T>, rng: &mut RngStream) {
    let (d, inner) = (cfg.model_dim, cfg.expert_inner_dim);
    for l in 0..cfg.num_layers {
        for e in 0..cfg.num_experts {
            let pre = expert_prefix(l, e);
            init_ln(p, &format!("{pre}.ln"), d);
            p.insert(format!("{pre}.ffn.w1"), xavier_uniform(d, inner, rng));
            p.insert(format!("{pre}.ffn.b1"), Tensor::zeros(&[inner]));
            p.insert(format!("{pre}.ffn.w2"), Tensor::zeros(&[inner, d]));
            p.insert(format!("{pre}.ffn.b2"), Tensor::zeros(&[d]));
        }
    }
}

fn expert_prefix(layer: usize, expert: usize) -> String {
    format!("{EXPERT_PREFIX}{layer}.{expert}")
}

/// Expert index for every sentence of a batch at every decoder layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertPlan {
    per_layer: Vec<Vec<usize>>,
}

impl ExpertPlan {
    /// The same per-sentence choice at all `layers`.
    pub fn shared(choices: Vec<usize>, layers: usize) -> Self {
        ExpertPlan {
            per_layer: vec![choices; layers],
        }
    }

    pub fn per_layer(per_layer: Vec<Vec<usize>>) -> Self {
        ExpertPlan { per_layer }
    }

    pub fn layer(&self, l: usize) -> &[usize] {
        &self.per_layer[l]
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    Sampled,
    Argmax,
}

/// One routing choice with the candidate set it was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub sentence_id: u64,
    pub mode: RoutingMode,
    pub candidates: Vec<usize>,
    pub p: Vec<f64>,
    pub chosen: usize,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest scores, ordered by score then index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `softmax(topk(s) / tau)` over the candidate set returned by [`top_k`].
pub fn candidate_probabilities(scores: &[f64], k: usize, tau: f64) -> (Vec<usize>, Vec<f64>) {
    let cand = top_k(scores, k);
    let logits: Vec<f64> = cand.iter().map(|&i| scores[i] / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    (cand, exps.into_iter().map(|e| e / total).collect())
}

/// Gumbel-Max routing over the top-`k` category scores.
///
/// With `k <= 1` this is a deterministic argmax. Otherwise the candidates'
/// relative probabilities are `softmax(topk(s) / tau)` and the chosen expert
/// is `argmax(log p + g)` with `g` i.i.d. Gumbel(0, 1).
pub fn gumbel_max_route(
    sentence_id: u64,
    scores: &[f64],
    k: usize,
    tau: f64,
    rng: &mut RngStream,
) -> Result<RoutingDecision> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("routing over zero categories".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be > 0")));
    }
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "routing k {k} exceeds {} categories",
            scores.len()
        )));
    }
    if k <= 1 {
        return Ok(inference_route(sentence_id, scores));
    }
    let (candidates, p) = candidate_probabilities(scores, k, tau);
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &pi) in p.iter().enumerate() {
        let v = pi.ln() + rng.gumbel();
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    Ok(RoutingDecision {
        sentence_id,
        mode: RoutingMode::Sampled,
        chosen: candidates[best],
        candidates,
        p,
    })
}

/// Deterministic inference routing: the category with the largest score.
pub fn inference_route(sentence_id: u64, scores: &[f64]) -> RoutingDecision {
    let chosen = argmax(scores);
    RoutingDecision {
        sentence_id,
        mode: RoutingMode::Argmax,
        candidates: vec![chosen],
        p: vec![1.0],
        chosen,
    }
}

impl<T: Scalar> Model<T> {
    /// `FFN(LN(z)) + z` for expert `expert` of decoder layer `layer`.
    pub fn expert_forward(&self, g: &mut Graph<T>, layer: usize, expert: usize, z: Var) -> Result<Var> {
        if expert >= self.config.num_experts {
            return Err(Error::Index {
                what: "expert",
                index: expert,
                size: self.config.num_experts,
            });
        }
        if layer >= self.config.num_layers {
            return Err(Error::Index {
                what: "decoder layer",
                index: layer,
                size: self.config.num_layers,
            });
        }
        let pre = expert_prefix(layer, expert);
        let normed = layer_norm(g, &self.params, &format!("{pre}.ln"), z)?;
        let f = ffn(g, &self.params, &format!("{pre}.ffn"), normed)?;
        g.add(f, z)
    }

    /// Route the rows of each sentence through its chosen expert.
    pub(super) fn apply_experts(
        &self,
        g: &mut Graph<T>,
        layer: usize,
        z: Var,
        choices: &[usize],
        seq_len: usize,
    ) -> Result<Var> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (b, &e) in choices.iter().enumerate() {
            groups
                .entry(e)
                .or_default()
                .extend(b * seq_len..(b + 1) * seq_len);
        }
        let mut parts = Vec::with_capacity(groups.len());
        for (e, rows) in groups {
            let x = g.gather_rows(z, &rows)?;
            let o = self.expert_forward(g, layer, e, x)?;
            parts.push((o, rows));
        }
        g.assemble_rows(parts, choices.len() * seq_len)
    }
}
