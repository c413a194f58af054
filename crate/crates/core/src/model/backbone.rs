//! Post-norm transformer encoder-decoder with fixed sinusoidal positions.

use log::warn;

use crate::corpus::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::params::{normal, xavier_uniform, ParamStore};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::ops::AttentionSpec;
use crate::tensor::{Graph, Tensor, Var};

use super::config::ModelConfig;
use super::experts::ExpertPlan;
use super::{Model, SHARED_EMBED};

/// Right-padded token batch flattened to `batch * len` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl PaddedBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        Self::with_len(seqs, len)
    }

    /// Pad every sequence to exactly `len` positions (sequences must fit).
    pub fn with_len(seqs: &[Vec<usize>], len: usize) -> Self {
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            assert!(s.len() <= len, "sequence longer than padded length");
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
            valid.extend(std::iter::repeat_n(false, len - s.len()));
        }
        PaddedBatch {
            ids,
            valid,
            batch: seqs.len(),
            len,
        }
    }
}

/// Encoder hidden states `h` for a batch, shape `(batch * len, d)`, plus the
/// pad mask. The same node feeds cross-attention and the discriminator.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub h: Var,
    pub batch: usize,
    pub len: usize,
    pub valid: Vec<bool>,
}

pub(super) fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut RngStream) -> ParamStore<T> {
    let d = cfg.model_dim;
    let mut p = ParamStore::new();
    let embed_std = (d as f64).powf(-0.5);
    if cfg.joint_vocab {
        p.insert(SHARED_EMBED, normal(&[cfg.src_vocab, d], embed_std, rng));
    } else {
        p.insert("enc.embed", normal(&[cfg.src_vocab, d], embed_std, rng));
        p.insert("dec.embed", normal(&[cfg.tgt_vocab, d], embed_std, rng));
    }
    for l in 0..cfg.num_layers {
        let pre = format!("enc.{l}");
        init_attention(&mut p, &format!("{pre}.self"), d, rng);
        init_ln(&mut p, &format!("{pre}.ln1"), d);
        init_ffn(&mut p, &format!("{pre}.ffn"), d, cfg.ffn_dim, rng);
        init_ln(&mut p, &format!("{pre}.ln2"), d);
    }
    for l in 0..cfg.num_layers {
        let pre = format!("dec.{l}");
        init_attention(&mut p, &format!("{pre}.self"), d, rng);
        init_ln(&mut p, &format!("{pre}.ln1"), d);
        init_attention(&mut p, &format!("{pre}.cross"), d, rng);
        init_ln(&mut p, &format!("{pre}.ln2"), d);
        init_ffn(&mut p, &format!("{pre}.ffn"), d, cfg.ffn_dim, rng);
        init_ln(&mut p, &format!("{pre}.ln3"), d);
    }
    // Near-zero readout so a fresh model predicts close to uniform.
    p.insert("dec.out.w", normal(&[d, cfg.tgt_vocab], 1.0 / d as f64, rng));
    p.insert("dec.out.b", Tensor::zeros(&[cfg.tgt_vocab]));
    p
}

fn init_attention<T: Scalar>(p: &mut ParamStore<T>, pre: &str, d: usize, rng: &mut RngStream) {
    for w in ["q", "k", "v", "o"] {
        p.insert(format!("{pre}.w{w}"), xavier_uniform(d, d, rng));
        p.insert(format!("{pre}.b{w}"), Tensor::zeros(&[d]));
    }
}

pub(crate) fn init_ln<T: Scalar>(p: &mut ParamStore<T>, pre: &str, d: usize) {
    p.insert(format!("{pre}.g"), Tensor::ones(&[d]));
    p.insert(format!("{pre}.b"), Tensor::zeros(&[d]));
}

fn init_ffn<T: Scalar>(p: &mut ParamStore<T>, pre: &str, d: usize, f: usize, rng: &mut RngStream) {
    p.insert(format!("{pre}.w1"), xavier_uniform(d, f, rng));
    p.insert(format!("{pre}.b1"), Tensor::zeros(&[f]));
    p.insert(format!("{pre}.w2"), xavier_uniform(f, d, rng));
    p.insert(format!("{pre}.b2"), Tensor::zeros(&[d]));
}

/// Fixed sinusoidal position table `(len, d)`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data[pos * d + i] = T::from_f64_lossy(v);
        }
    }
    Tensor::new(vec![len, d], data).expect("shape matches")
}

pub(crate) fn layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    pre: &str,
    x: Var,
) -> Result<Var> {
    let gain = g.bind(p, &format!("{pre}.g"))?;
    let bias = g.bind(p, &format!("{pre}.b"))?;
    g.layer_norm(x, gain, bias)
}

pub(crate) fn linear<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    w: &str,
    b: &str,
    x: Var,
) -> Result<Var> {
    let w = g.bind(p, w)?;
    let b = g.bind(p, b)?;
    g.linear(x, w, b)
}

/// `relu(x W1 + b1) W2 + b2`.
pub(crate) fn ffn<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, pre: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{pre}.w1"), &format!("{pre}.b1"), x)?;
    let h = g.relu(h);
    linear(g, p, &format!("{pre}.w2"), &format!("{pre}.b2"), h)
}

fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    pre: &str,
    query: Var,
    memory: Var,
    spec: AttentionSpec,
) -> Result<Var> {
    let q = linear(g, p, &format!("{pre}.wq"), &format!("{pre}.bq"), query)?;
    let k = linear(g, p, &format!("{pre}.wk"), &format!("{pre}.bk"), memory)?;
    let v = linear(g, p, &format!("{pre}.wv"), &format!("{pre}.bv"), memory)?;
    let a = g.attention(q, k, v, spec)?;
    linear(g, p, &format!("{pre}.wo"), &format!("{pre}.bo"), a)
}

impl<T: Scalar> Model<T> {
    fn embed_table(&self, side: &str) -> String {
        if self.config.joint_vocab {
            SHARED_EMBED.to_string()
        } else {
            format!("{side}.embed")
        }
    }

    /// Source ids plus end marker, truncated to `max_len`.
    pub fn prepare_source(&self, ids: &[usize]) -> Result<Vec<usize>> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty sentence".into()));
        }
        let max = self.config.max_len;
        let mut out: Vec<usize> = ids.to_vec();
        if out.len() + 1 > max {
            warn!(
                "source of length {} truncated to max_len {}",
                ids.len(),
                max
            );
            out.truncate(max - 1);
        }
        out.push(EOS);
        Ok(out)
    }

    /// Teacher-forcing decoder input `[BOS, y..]` and output `[y.., EOS]`.
    pub fn prepare_target(&self, ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let max = self.config.max_len;
        let mut y: Vec<usize> = ids.to_vec();
        if y.len() + 1 > max {
            warn!("target of length {} truncated to max_len {}", ids.len(), max);
            y.truncate(max - 1);
        }
        let mut input = Vec::with_capacity(y.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&y);
        let mut output = y;
        output.push(EOS);
        (input, output)
    }

    fn embed(&self, g: &mut Graph<T>, side: &str, batch: &PaddedBatch) -> Result<Var> {
        let d = self.config.model_dim;
        let table = g.bind(&self.params, &self.embed_table(side))?;
        let e = g.embedding(table, &batch.ids)?;
        let e = g.scale(e, T::from_f64_lossy((d as f64).sqrt()));
        let pe = sinusoidal_positions::<T>(batch.len, d);
        let mut tiled = Vec::with_capacity(batch.batch * batch.len * d);
        for _ in 0..batch.batch {
            tiled.extend_from_slice(pe.data());
        }
        let pe = g.constant(Tensor::new(vec![batch.batch * batch.len, d], tiled)?);
        g.add(e, pe)
    }

    /// Encode already-prepared source sequences (see [`Model::prepare_source`]).
    pub fn encode_prepared(
        &self,
        g: &mut Graph<T>,
        src: &[Vec<usize>],
        mut rng: Option<&mut RngStream>,
    ) -> Result<EncoderOutput> {
        let batch = PaddedBatch::new(src);
        let cfg = &self.config;
        let p = &self.params;
        let mut x = self.embed(g, "enc", &batch)?;
        x = g.dropout(x, self.config.dropout, rng.as_deref_mut());
        for l in 0..cfg.num_layers {
            let pre = format!("enc.{l}");
            let spec = AttentionSpec {
                batch: batch.batch,
                q_len: batch.len,
                k_len: batch.len,
                heads: cfg.num_heads,
                causal: false,
                key_valid: batch.valid.clone(),
            };
            let a = attention_block(g, p, &format!("{pre}.self"), x, x, spec)?;
            let a = g.dropout(a, self.config.dropout, rng.as_deref_mut());
            let r = g.add(x, a)?;
            x = layer_norm(g, p, &format!("{pre}.ln1"), r)?;
            let f = ffn(g, p, &format!("{pre}.ffn"), x)?;
            let f = g.dropout(f, self.config.dropout, rng.as_deref_mut());
            let r = g.add(x, f)?;
            x = layer_norm(g, p, &format!("{pre}.ln2"), r)?;
        }
        Ok(EncoderOutput {
            h: x,
            batch: batch.batch,
            len: batch.len,
            valid: batch.valid,
        })
    }

    /// Encode raw source token ids (end marker appended, over-length truncated).
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        src: &[Vec<usize>],
        rng: Option<&mut RngStream>,
    ) -> Result<EncoderOutput> {
        let prepared = src
            .iter()
            .map(|s| self.prepare_source(s))
            .collect::<Result<Vec<_>>>()?;
        self.encode_prepared(g, &prepared, rng)
    }

    /// Encoder hidden states of one sentence as an `(n, d)` tensor.
    pub fn encode_sentence(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, &[ids.to_vec()], None)?;
        Ok(g.value(enc.h).clone())
    }

    /// Final decoder hidden states `(batch * len, d)` for decoder inputs
    /// `tgt_in`, with experts applied after every layer when `plan` is given.
    pub fn decode_hidden(
        &self,
        g: &mut Graph<T>,
        enc: &EncoderOutput,
        tgt_in: &[Vec<usize>],
        plan: Option<&ExpertPlan>,
        mut rng: Option<&mut RngStream>,
    ) -> Result<(Var, PaddedBatch)> {
        if tgt_in.len() != enc.batch {
            return Err(Error::shape("decode", &[tgt_in.len()], &[enc.batch]));
        }
        let batch = PaddedBatch::new(tgt_in);
        let cfg = &self.config;
        let p = &self.params;
        let mut x = self.embed(g, "dec", &batch)?;
        x = g.dropout(x, self.config.dropout, rng.as_deref_mut());
        for l in 0..cfg.num_layers {
            let pre = format!("dec.{l}");
            let self_spec = AttentionSpec {
                batch: batch.batch,
                q_len: batch.len,
                k_len: batch.len,
                heads: cfg.num_heads,
                causal: true,
                key_valid: batch.valid.clone(),
            };
            let a = attention_block(g, p, &format!("{pre}.self"), x, x, self_spec)?;
            let a = g.dropout(a, self.config.dropout, rng.as_deref_mut());
            let r = g.add(x, a)?;
            x = layer_norm(g, p, &format!("{pre}.ln1"), r)?;
            let cross_spec = AttentionSpec {
                batch: batch.batch,
                q_len: batch.len,
                k_len: enc.len,
                heads: cfg.num_heads,
                causal: false,
                key_valid: enc.valid.clone(),
            };
            let c = attention_block(g, p, &format!("{pre}.cross"), x, enc.h, cross_spec)?;
            let c = g.dropout(c, self.config.dropout, rng.as_deref_mut());
            let r = g.add(x, c)?;
            x = layer_norm(g, p, &format!("{pre}.ln2"), r)?;
            let f = ffn(g, p, &format!("{pre}.ffn"), x)?;
            let f = g.dropout(f, self.config.dropout, rng.as_deref_mut());
            let r = g.add(x, f)?;
            x = layer_norm(g, p, &format!("{pre}.ln3"), r)?;
            if let Some(plan) = plan {
                x = self.apply_experts(g, l, x, plan.layer(l), batch.len)?;
            }
        }
        Ok((x, batch))
    }

    /// Output-vocabulary logits for decoder hidden rows.
    pub fn project(&self, g: &mut Graph<T>, hidden: Var) -> Result<Var> {
        linear(g, &self.params, "dec.out.w", "dec.out.b", hidden)
    }

    /// Logits `(batch * len, V_tgt)` for the decoder inputs `tgt_in`.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        enc: &EncoderOutput,
        tgt_in: &[Vec<usize>],
        plan: Option<&ExpertPlan>,
        rng: Option<&mut RngStream>,
    ) -> Result<(Var, PaddedBatch)> {
        let (h, batch) = self.decode_hidden(g, enc, tgt_in, plan, rng)?;
        Ok((self.project(g, h)?, batch))
    }

    /// Mean per-token cross-entropy of `tgt` given `src` under teacher forcing.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        src: &[Vec<usize>],
        tgt: &[Vec<usize>],
        plan: Option<&ExpertPlan>,
        mut rng: Option<&mut RngStream>,
    ) -> Result<(Var, usize)> {
        let enc = self.encode(g, src, rng.as_deref_mut())?;
        self.loss_from_encoding(g, &enc, tgt, plan, rng)
    }

    pub fn loss_from_encoding(
        &self,
        g: &mut Graph<T>,
        enc: &EncoderOutput,
        tgt: &[Vec<usize>],
        plan: Option<&ExpertPlan>,
        rng: Option<&mut RngStream>,
    ) -> Result<(Var, usize)> {
        let (inputs, outputs): (Vec<_>, Vec<_>) =
            tgt.iter().map(|t| self.prepare_target(t)).unzip();
        let (logits, batch) = self.decode(g, enc, &inputs, plan, rng)?;
        let targets = PaddedBatch::with_len(&outputs, batch.len);
        let tokens = targets.valid.iter().filter(|&&v| v).count();
        let loss = g.cross_entropy(logits, &targets.ids, Some(PAD))?;
        Ok((loss, tokens))
    }

    /// Summed (not averaged) negative log-likelihood of each target sentence.
    pub fn sentence_nll(
        &self,
        src: &[Vec<usize>],
        tgt: &[Vec<usize>],
        plan: Option<&ExpertPlan>,
    ) -> Result<Vec<(f64, usize)>> {
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, src, None)?;
        let (inputs, outputs): (Vec<_>, Vec<_>) =
            tgt.iter().map(|t| self.prepare_target(t)).unzip();
        let (logits, batch) = self.decode(&mut g, &enc, &inputs, plan, None)?;
        let lt = g.value(logits);
        let mut out = Vec::with_capacity(tgt.len());
        for (b, o) in outputs.iter().enumerate() {
            let mut total = 0.0;
            for (i, &tok) in o.iter().enumerate() {
                let row = lt.row(b * batch.len + i);
                total += (crate::tensor::ops::log_sum_exp(row) - row[tok]).to_f64_lossy();
            }
            out.push((total, o.len()));
        }
        Ok(out)
    }
}
