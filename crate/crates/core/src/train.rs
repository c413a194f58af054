//! Stage-wise training: backbone, discriminator distillation, experts.
//!
//! Each stage binds only its own parameter prefix as trainable; everything
//! else enters the graph as a constant and is verified unchanged afterwards
//! through the frozen-set hashes.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::DomainDataset;
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::experts::{argmax, gumbel_max_route, inference_route};
use crate::model::{
    discriminator, ExpertPlan, Model, OptimConfig, RoutingDecision, BACKBONE_PREFIXES, DISCRIMINATOR_PREFIX,
    EXPERT_PREFIX,
};
use crate::optim::{clip_grad_norm, noam_lr, AdamState};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Trainable, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Sentences per batch.
    pub batch_size: usize,
    pub backbone_updates: u64,
    pub discriminator_updates: u64,
    pub expert_updates: u64,
    /// Dev evaluation interval, in updates.
    pub eval_every: u64,
    /// Dev evaluations without improvement before expert training stops.
    pub patience: usize,
    pub log_every: u64,
    /// Optimizer overrides; `None` uses the model's optimizer settings.
    pub discriminator_optim: Option<OptimConfig>,
    pub expert_optim: Option<OptimConfig>,
    /// Sentences per forward pass when scoring or evaluating.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            backbone_updates: 2000,
            discriminator_updates: 600,
            expert_updates: 1500,
            eval_every: 100,
            patience: 5,
            log_every: 10,
            discriminator_optim: None,
            expert_optim: None,
            eval_batch_size: 64,
        }
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub updates: u64,
    pub final_loss: f64,
    /// Dev loss after each evaluation.
    pub dev_losses: Vec<f64>,
    pub best_dev_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Optional sinks for the JSON-lines training and routing logs.
#[derive(Default)]
pub struct StageLogs<'a> {
    pub train: Option<&'a mut dyn Write>,
    pub routing: Option<&'a mut dyn Write>,
}

fn write_jsonl<S: Serialize>(w: &mut Option<&mut dyn Write>, rec: &S) -> Result<()> {
    if let Some(w) = w {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        w.write_all(&line).map_err(|e| Error::io("<log>", e))?;
    }
    Ok(())
}

/// Endless shuffled mini-batches of corpus indices, reshuffled each epoch.
pub struct Batcher {
    n: usize,
    batch_size: usize,
    rng: RngStream,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("cannot batch an empty corpus".into()));
        }
        let mut b = Batcher {
            n,
            batch_size: batch_size.max(1),
            rng: RngStream::new(seed),
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        b.reshuffle();
        Ok(b)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.rng.derive_named("epoch", self.epoch).shuffle(&mut self.order);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

type BatchFn<'a, T> = dyn FnMut(&Model<T>, &mut Graph<T>, u64) -> Result<(Var, usize)> + 'a;
type EvalFn<'a, T> = dyn FnMut(&Model<T>) -> Result<f64> + 'a;

struct Loop<'a, T: Scalar> {
    trainable: Vec<String>,
    optim: OptimConfig,
    updates: u64,
    checked: bool,
    eval_every: u64,
    patience: Option<usize>,
    log_every: u64,
    log: Option<&'a mut dyn Write>,
    _t: std::marker::PhantomData<T>,
}

fn snapshot<T: Scalar>(model: &Model<T>, prefixes: &[String]) -> BTreeMap<String, Tensor<T>> {
    model
        .params
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p.as_str())))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

impl<T: Scalar> Loop<'_, T> {
    fn run(
        mut self,
        model: &mut Model<T>,
        batch: &mut BatchFn<'_, T>,
        mut evaluate: Option<&mut EvalFn<'_, T>>,
    ) -> Result<StageReport> {
        let mut adam = AdamState::new(self.optim.adam());
        let trainable = Trainable::prefixes(&self.trainable);
        let accum = self.optim.update_freq.max(1);
        let mut report = StageReport::default();
        let mut best: Option<(f64, BTreeMap<String, Tensor<T>>)> = None;
        let mut bad_evals = 0;
        let mut window_tokens = 0usize;
        let mut window_start = Instant::now();
        for step in 1..=self.updates {
            let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
            let mut loss_sum = 0.0;
            for micro in 0..accum {
                let mut g = Graph::new(trainable.clone()).with_checked(self.checked);
                let (loss, tokens) = batch(model, &mut g, (step - 1) * accum as u64 + micro as u64)?;
                let lv = g.value(loss).data()[0].to_f64_lossy();
                if !lv.is_finite() {
                    return Err(Error::Diverged {
                        step: step as usize,
                        loss: lv,
                    });
                }
                g.backward(loss)?;
                g.check()?;
                loss_sum += lv;
                window_tokens += tokens;
                for (name, gv) in g.param_grads() {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.iter_mut().zip(gv).for_each(|(a, b)| *a = *a + b),
                        None => {
                            grads.insert(name, gv);
                        }
                    }
                }
            }
            if accum > 1 {
                let s = T::from_f64_lossy(1.0 / accum as f64);
                grads.values_mut().flatten().for_each(|v| *v = *v * s);
            }
            if let Some(c) = self.optim.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            let lr = noam_lr(step, self.optim.warmup, self.optim.peak_lr)?;
            adam.step(&mut model.params, &grads, lr, self.checked)?;
            report.updates = step;
            report.final_loss = loss_sum / accum as f64;
            if step % self.log_every.max(1) == 0 || step == self.updates {
                let secs = window_start.elapsed().as_secs_f64();
                let rec = LogRecord {
                    step,
                    lr,
                    loss: report.final_loss,
                    tokens_per_sec: if secs > 0.0 { window_tokens as f64 / secs } else { 0.0 },
                };
                write_jsonl(&mut self.log, &rec)?;
                log::debug!("step {step} lr {lr:.3e} loss {:.4}", rec.loss);
                window_tokens = 0;
                window_start = Instant::now();
            }
            if let Some(eval) = evaluate.as_mut() {
                if step % self.eval_every.max(1) == 0 || step == self.updates {
                    let dev = eval(model)?;
                    report.dev_losses.push(dev);
                    log::info!("step {step}: dev loss {dev:.4}");
                    if best.as_ref().is_none_or(|(b, _)| dev < *b) {
                        best = Some((dev, snapshot(model, &self.trainable)));
                        bad_evals = 0;
                    } else {
                        bad_evals += 1;
                        if self.patience.is_some_and(|p| bad_evals >= p) {
                            report.stopped_early = true;
                            break;
                        }
                    }
                }
            }
        }
        if let Some((b, params)) = best {
            report.best_dev_loss = Some(b);
            for (name, t) in params {
                *model.params.get_mut(&name)? = t;
            }
        }
        Ok(report)
    }
}

/// Token-weighted mean cross-entropy over `corpus`. With `route`, every
/// sentence goes through the expert its discriminator argmax selects.
pub fn corpus_loss<T: Scalar>(model: &Model<T>, corpus: &ParallelCorpus, route: bool, batch_size: usize) -> Result<f64> {
    let parts = sentence_losses(model, corpus, route, batch_size)?;
    let tokens: usize = parts.iter().map(|p| p.1).sum();
    if tokens == 0 {
        return Err(Error::InvalidArgument("loss over an empty corpus".into()));
    }
    Ok(parts.iter().map(|p| p.0).sum::<f64>() / tokens as f64)
}

/// Summed negative log-likelihood and token count of every sentence.
pub fn sentence_losses<T: Scalar>(
    model: &Model<T>,
    corpus: &ParallelCorpus,
    route: bool,
    batch_size: usize,
) -> Result<Vec<(f64, usize)>> {
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.pairs.chunks(batch_size.max(1)) {
        let src: Vec<Vec<usize>> = chunk.iter().map(|p| p.src.clone()).collect();
        let tgt: Vec<Vec<usize>> = chunk.iter().map(|p| p.tgt.clone()).collect();
        let plan = if route {
            let scores = model.score_sentences(&src, batch_size)?;
            Some(ExpertPlan::shared(
                scores.iter().map(|s| argmax(s)).collect(),
                model.config.num_layers,
            ))
        } else {
            None
        };
        out.extend(model.sentence_nll(&src, &tgt, plan.as_ref())?);
    }
    Ok(out)
}

fn split_batch(corpus: &ParallelCorpus, idx: &[usize]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<u64>) {
    let mut src = Vec::with_capacity(idx.len());
    let mut tgt = Vec::with_capacity(idx.len());
    let mut ids = Vec::with_capacity(idx.len());
    for &i in idx {
        let p = &corpus.pairs[i];
        src.push(p.src.clone());
        tgt.push(p.tgt.clone());
        ids.push(p.id);
    }
    (src, tgt, ids)
}

/// Stage 1: train every backbone parameter on the mixed corpus.
pub fn train_backbone<T: Scalar>(
    model: &mut Model<T>,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    cfg: &TrainConfig,
    seed: u64,
    checked: bool,
    logs: StageLogs<'_>,
) -> Result<StageReport> {
    let root = RngStream::new(seed);
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, root.derive_named("backbone.batches", 0).next_u64())?;
    let dropout_rng = root.derive_named("backbone.dropout", 0);
    let mut batch = |m: &Model<T>, g: &mut Graph<T>, k: u64| {
        let (src, tgt, _) = split_batch(train, &batcher.next_batch());
        let mut rng = dropout_rng.derive(k);
        m.loss(g, &src, &tgt, None, Some(&mut rng))
    };
    let eval_bs = cfg.eval_batch_size;
    let mut eval = |m: &Model<T>| corpus_loss(m, dev, false, eval_bs);
    let lp = Loop {
        trainable: BACKBONE_PREFIXES.iter().map(|s| s.to_string()).collect(),
        optim: model.config.optim.clone(),
        updates: cfg.backbone_updates,
        checked,
        eval_every: cfg.eval_every,
        patience: None,
        log_every: cfg.log_every,
        log: logs.train,
        _t: std::marker::PhantomData,
    };
    let evaluate: Option<&mut EvalFn<'_, T>> = if dev.is_empty() { None } else { Some(&mut eval) };
    lp.run(model, &mut batch, evaluate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorReport {
    pub stage: StageReport,
    /// Agreement of the trained discriminator with its cluster labels.
    pub train_accuracy: f64,
    /// Agreement of always predicting the most frequent label.
    pub majority_baseline: f64,
}

/// Training-set agreement of the argmax of `scores` with `labels`.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(s, &l)| argmax(s) == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Stage 2 on precomputed features `(n, d)`: only the discriminator's four
/// tensors change.
pub fn train_discriminator_on_features<T: Scalar>(
    model: &mut Model<T>,
    features: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    checked: bool,
    logs: StageLogs<'_>,
) -> Result<DiscriminatorReport> {
    let k = model.config.num_experts;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index {
            what: "cluster label",
            index: bad,
            size: k,
        });
    }
    let (n, d) = features.as_matrix_dims();
    if n != labels.len() {
        return Err(Error::shape("discriminator labels", &[n], &[labels.len()]));
    }
    if !model.has_discriminator() {
        model.init_discriminator(seed);
    }
    let frozen = model.backbone_hash();
    let root = RngStream::new(seed);
    let mut batcher = Batcher::new(n, cfg.batch_size, root.derive_named("discriminator.batches", 0).next_u64())?;
    let mut batch = |m: &Model<T>, g: &mut Graph<T>, _k: u64| {
        let idx = batcher.next_batch();
        let mut rows = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            rows.extend_from_slice(features.row(i));
        }
        let f = g.constant(Tensor::new(vec![idx.len(), d], rows)?);
        let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let loss = discriminator::distillation_loss(g, &m.params, f, &lab)?;
        Ok((loss, idx.len()))
    };
    let lp = Loop {
        trainable: vec![DISCRIMINATOR_PREFIX.to_string()],
        optim: cfg.discriminator_optim.clone().unwrap_or_else(|| model.config.optim.clone()),
        updates: cfg.discriminator_updates,
        checked,
        eval_every: u64::MAX,
        patience: None,
        log_every: cfg.log_every,
        log: logs.train,
        _t: std::marker::PhantomData,
    };
    let stage = lp.run(model, &mut batch, None)?;
    if model.backbone_hash() != frozen {
        return Err(Error::FrozenMutation("backbone changed during discriminator training".into()));
    }
    let scores = crate::cluster::tensor_rows(&model.category_scores(features)?);
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    Ok(DiscriminatorReport {
        stage,
        train_accuracy: accuracy(&scores, labels),
        majority_baseline: *counts.iter().max().unwrap_or(&0) as f64 / n.max(1) as f64,
    })
}

/// Stage 2: distil cluster labels into the discriminator.
pub fn train_discriminator<T: Scalar>(
    model: &mut Model<T>,
    dataset: &DomainDataset,
    cfg: &TrainConfig,
    seed: u64,
    checked: bool,
    logs: StageLogs<'_>,
) -> Result<DiscriminatorReport> {
    if dataset.num_categories != model.config.num_experts {
        return Err(Error::Config(format!(
            "dataset has {} categories but the model has {} experts",
            dataset.num_categories, model.config.num_experts
        )));
    }
    let features = model.sentence_features(&dataset.sources(), cfg.eval_batch_size)?;
    train_discriminator_on_features(model, &features, &dataset.labels(), cfg, seed, checked, logs)
}

/// Routing decisions for one batch. Each sentence's draw uses a stream
/// derived from the seed, its id and the forward-pass counter. With
/// `per_layer` every decoder layer gets its own draw; otherwise one draw is
/// shared by all `layers`.
#[allow(clippy::too_many_arguments)]
pub fn route_batch(
    scores: &[&[f64]],
    ids: &[u64],
    k: usize,
    tau: f64,
    layers: usize,
    per_layer: bool,
    root: &RngStream,
    pass: u64,
) -> Result<(ExpertPlan, Vec<RoutingDecision>)> {
    let draws = if per_layer { layers } else { 1 };
    let mut decisions = Vec::with_capacity(ids.len() * draws);
    let mut table = vec![Vec::with_capacity(ids.len()); draws];
    for (s, &id) in scores.iter().zip(ids) {
        let mut rng = root.derive(id).derive(pass);
        for row in table.iter_mut() {
            let d = gumbel_max_route(id, s, k, tau, &mut rng)?;
            row.push(d.chosen);
            decisions.push(d);
        }
    }
    let plan = if per_layer {
        ExpertPlan::per_layer(table)
    } else {
        ExpertPlan::shared(table.remove(0), layers)
    };
    Ok((plan, decisions))
}

/// Stage 3: train the expert bank with Gumbel-Max routing, keeping the
/// backbone and discriminator frozen; early-stops on dev loss.
pub fn train_experts<T: Scalar>(
    model: &mut Model<T>,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    cfg: &TrainConfig,
    seed: u64,
    checked: bool,
    logs: StageLogs<'_>,
) -> Result<StageReport> {
    if !model.has_discriminator() {
        return Err(Error::StageIncomplete("discriminator"));
    }
    if !model.has_experts() {
        model.init_experts(seed);
    }
    let frozen = model.backbone_and_discriminator_hash();
    let scores = model.score_sentences(&train.sources(), cfg.eval_batch_size)?;
    let root = RngStream::new(seed);
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, root.derive_named("experts.batches", 0).next_u64())?;
    let route_root = root.derive_named("experts.route", 0);
    let dropout_rng = root.derive_named("experts.dropout", 0);
    let (k, tau) = (model.config.routing_k, model.config.temperature);
    let layers = model.config.num_layers;
    let per_layer = model.config.route_per_layer;
    let mut routing_log = logs.routing;
    let mut batch = |m: &Model<T>, g: &mut Graph<T>, pass: u64| {
        if checked && m.backbone_and_discriminator_hash() != frozen {
            return Err(Error::FrozenMutation("frozen parameters changed during expert training".into()));
        }
        let idx = batcher.next_batch();
        let (src, tgt, ids) = split_batch(train, &idx);
        let s: Vec<&[f64]> = idx.iter().map(|&i| scores[i].as_slice()).collect();
        let (plan, decisions) = route_batch(&s, &ids, k, tau, layers, per_layer, &route_root, pass)?;
        for d in &decisions {
            write_jsonl(&mut routing_log, d)?;
        }
        let mut rng = dropout_rng.derive(pass);
        m.loss(g, &src, &tgt, Some(&plan), Some(&mut rng))
    };
    let eval_bs = cfg.eval_batch_size;
    let mut eval = |m: &Model<T>| corpus_loss(m, dev, true, eval_bs);
    let lp = Loop {
        trainable: vec![EXPERT_PREFIX.to_string()],
        optim: cfg.expert_optim.clone().unwrap_or_else(|| model.config.optim.clone()),
        updates: cfg.expert_updates,
        checked,
        eval_every: cfg.eval_every,
        patience: Some(cfg.patience),
        log_every: cfg.log_every,
        log: logs.train,
        _t: std::marker::PhantomData,
    };
    let evaluate: Option<&mut EvalFn<'_, T>> = if dev.is_empty() { None } else { Some(&mut eval) };
    let report = lp.run(model, &mut batch, evaluate)?;
    if model.backbone_and_discriminator_hash() != frozen {
        return Err(Error::FrozenMutation("frozen parameters changed during expert training".into()));
    }
    Ok(report)
}

/// Inference routing decisions (argmax of discriminator scores) for a corpus.
pub fn inference_decisions<T: Scalar>(model: &Model<T>, corpus: &ParallelCorpus, batch_size: usize) -> Result<Vec<RoutingDecision>> {
    let scores = model.score_sentences(&corpus.sources(), batch_size)?;
    Ok(corpus
        .pairs
        .iter()
        .zip(&scores)
        .map(|(p, s)| inference_route(p.id, s))
        .collect())
}
