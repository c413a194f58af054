//! Greedy and beam-search decoding.

use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{BOS, EOS, PAD};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

use super::experts::ExpertPlan;
use super::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Output tokens, always terminated by the end marker.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob` divided by the hypothesis length (end marker included).
    pub score: f64,
    /// `false` when the end marker was appended because decoding hit the
    /// length limit.
    pub completed: bool,
}

impl Hypothesis {
    /// Tokens without the trailing end marker.
    pub fn output(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamOutput {
    /// Hypotheses sorted by non-increasing `score`.
    pub nbest: Vec<Hypothesis>,
}

impl BeamOutput {
    pub fn best(&self) -> &Hypothesis {
        &self.nbest[0]
    }
}

struct StepContext<T> {
    memory: Tensor<T>,
    src_len: usize,
}

impl<T: Scalar> Model<T> {
    fn decode_limit(&self, src_len: usize) -> usize {
        (2 * src_len + 10).min(self.config.max_len - 1)
    }

    fn prepare_step(&self, src: &[usize]) -> Result<StepContext<T>> {
        let prepared = self.prepare_source(src)?;
        let mut g = Graph::inference();
        let enc = self.encode_prepared(&mut g, std::slice::from_ref(&prepared), None)?;
        Ok(StepContext {
            memory: g.value(enc.h).clone(),
            src_len: prepared.len(),
        })
    }

    /// Log-probabilities of the next token after each prefix, one row per prefix.
    fn next_log_probs(
        &self,
        ctx: &StepContext<T>,
        prefixes: &[Vec<usize>],
        expert: Option<usize>,
    ) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let mut g = Graph::inference();
        let mut tiled = Vec::with_capacity(n * ctx.memory.numel());
        for _ in 0..n {
            tiled.extend_from_slice(ctx.memory.data());
        }
        let d = self.config.model_dim;
        let h = g.constant(Tensor::new(vec![n * ctx.src_len, d], tiled)?);
        let enc = super::EncoderOutput {
            h,
            batch: n,
            len: ctx.src_len,
            valid: vec![true; n * ctx.src_len],
        };
        let plan = expert.map(|e| ExpertPlan::shared(vec![e; n], self.config.num_layers));
        let (hidden, batch) = self.decode_hidden(&mut g, &enc, prefixes, plan.as_ref(), None)?;
        let last: Vec<usize> = prefixes
            .iter()
            .enumerate()
            .map(|(b, p)| b * batch.len + p.len() - 1)
            .collect();
        let rows = g.gather_rows(hidden, &last)?;
        let logits = self.project(&mut g, rows)?;
        let lt = g.value(logits);
        Ok((0..n)
            .map(|i| {
                let row: Vec<f64> = lt.row(i).iter().map(|v| v.to_f64_lossy()).collect();
                let lse = crate::tensor::ops::log_sum_exp(&row);
                row.into_iter().map(|v| v - lse).collect()
            })
            .collect())
    }

    /// Argmax decoding (ties to the lowest token id); output excludes the end marker.
    pub fn greedy_decode(&self, src: &[usize], expert: Option<usize>) -> Result<Vec<usize>> {
        let ctx = self.prepare_step(src)?;
        let limit = self.decode_limit(ctx.src_len);
        let mut prefix = vec![BOS];
        while prefix.len() <= limit {
            let lp = self.next_log_probs(&ctx, std::slice::from_ref(&prefix), expert)?;
            let next = best_token(&lp[0]);
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        Ok(prefix[1..].to_vec())
    }

    /// Beam search with length-normalized final scores. `beam_size == 1`
    /// reproduces [`Model::greedy_decode`].
    pub fn beam_decode(
        &self,
        src: &[usize],
        beam_size: usize,
        expert: Option<usize>,
    ) -> Result<BeamOutput> {
        let beam = beam_size.max(1);
        let ctx = self.prepare_step(src)?;
        let limit = self.decode_limit(ctx.src_len);
        let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
        let mut finished: Vec<Hypothesis> = Vec::new();
        while !live.is_empty() && finished.len() < beam && live[0].0.len() <= limit {
            let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| p.clone()).collect();
            let lps = self.next_log_probs(&ctx, &prefixes, expert)?;
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (h, lp) in lps.iter().enumerate() {
                for (tok, &l) in lp.iter().enumerate() {
                    if tok == PAD || tok == BOS {
                        continue;
                    }
                    cands.push((live[h].1 + l, h, tok));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cands.truncate(2 * beam);
            let mut next_live = Vec::with_capacity(beam);
            for (rank, &(s, h, tok)) in cands.iter().enumerate() {
                if tok == EOS {
                    if rank < beam && finished.len() < beam {
                        let mut tokens = live[h].0[1..].to_vec();
                        tokens.push(EOS);
                        finished.push(hypothesis(tokens, s, true));
                    }
                } else if next_live.len() < beam {
                    let mut p = live[h].0.clone();
                    p.push(tok);
                    next_live.push((p, s));
                }
            }
            live = next_live;
        }
        if finished.is_empty() {
            for (p, s) in live {
                let mut tokens = p[1..].to_vec();
                tokens.push(EOS);
                finished.push(hypothesis(tokens, s, false));
            }
        }
        finished.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(BeamOutput { nbest: finished })
    }

    /// Expert chosen by inference routing, when the model has experts and a
    /// discriminator; `None` means plain backbone decoding.
    pub fn inference_expert(&self, src: &[usize]) -> Result<Option<usize>> {
        if self.has_experts() && self.has_discriminator() {
            Ok(Some(self.classify(src)?.0))
        } else {
            Ok(None)
        }
    }

    /// Translate with automatic routing; returns output tokens without the end marker.
    pub fn translate(&self, src: &[usize], beam_size: usize) -> Result<Vec<usize>> {
        let expert = self.inference_expert(src)?;
        Ok(self.beam_decode(src, beam_size, expert)?.best().output().to_vec())
    }
}

fn hypothesis(tokens: Vec<usize>, log_prob: f64, completed: bool) -> Hypothesis {
    let score = log_prob / tokens.len() as f64;
    Hypothesis {
        tokens,
        log_prob,
        score,
        completed,
    }
}

fn best_token(lp: &[f64]) -> usize {
    let mut best = None;
    for (tok, &l) in lp.iter().enumerate() {
        if tok == PAD || tok == BOS {
            continue;
        }
        match best {
            Some((_, bl)) if l <= bl => {}
            _ => best = Some((tok, l)),
        }
    }
    best.map(|(t, _)| t).unwrap_or(EOS)
}
