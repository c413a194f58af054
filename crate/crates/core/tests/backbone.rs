mod common;

use std::sync::OnceLock;

use common::random_sentences;
use mdmt_core::corpus::vocab::{BOS, EOS};
use mdmt_core::corpus::{ParallelCorpus, SentencePair};
use mdmt_core::model::ModelConfig;
use mdmt_core::train::{corpus_loss, train_backbone, StageLogs, StageReport, TrainConfig};
use mdmt_core::{Graph, Model, RngStream};

const V: usize = 24;
const COPY_UPDATES: u64 = 2000;

/// Copy-task runs and the bounds they must meet: the dev loss and exact
/// round-trip rate the frozen runs reached, with a little slack.
struct CopySetup {
    train: usize,
    dropout: f64,
    dev_loss: f64,
    round_trip: f64,
}

/// 200 pairs is too few for the desk model to learn copying in general;
/// it partly memorizes even with dropout.
const SMALL_COPY: CopySetup = CopySetup {
    train: 200,
    dropout: 0.1,
    dev_loss: 0.6,
    round_trip: 0.7,
};

const LARGE_COPY: CopySetup = CopySetup {
    train: 1000,
    dropout: 0.0,
    dev_loss: 0.1,
    round_trip: 0.95,
};

fn desk(seed: u64) -> ModelConfig {
    ModelConfig {
        src_vocab: V,
        tgt_vocab: V,
        seed,
        ..ModelConfig::desk()
    }
}

fn copy_corpus(n: usize, seed: u64) -> ParallelCorpus {
    let mut rng = RngStream::new(seed);
    let pairs = random_sentences(n, V, 4, 8, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, s)| SentencePair {
            id: i as u64,
            src: s.clone(),
            tgt: s,
            domain: None,
        })
        .collect();
    ParallelCorpus::new(pairs)
}

fn hidden(model: &Model<f64>, src: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let mut g = Graph::inference();
    let enc = model.encode(&mut g, src, None).unwrap();
    let h = g.value(enc.h);
    (0..enc.batch * enc.len).map(|r| h.row(r).to_vec()).collect()
}

fn logits(model: &Model<f64>, src: &[Vec<usize>], tgt_in: &[Vec<usize>]) -> (Vec<Vec<f64>>, usize) {
    let mut g = Graph::inference();
    let enc = model.encode(&mut g, src, None).unwrap();
    let (l, batch) = model.decode(&mut g, &enc, tgt_in, None, None).unwrap();
    let t = g.value(l);
    ((0..batch.batch * batch.len).map(|r| t.row(r).to_vec()).collect(), batch.len)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn encoder_output_has_one_row_per_prepared_token() {
    let model = Model::<f64>::new(desk(1)).unwrap();
    for n in [1, 2, 7, 30] {
        let src: Vec<usize> = (0..n).map(|i| 4 + i % (V - 4)).collect();
        let h = model.encode_sentence(&src).unwrap();
        assert_eq!(h.shape(), &[n + 1, 64]);
    }
}

#[test]
fn over_length_source_is_truncated() {
    let model = Model::<f64>::new(desk(1)).unwrap();
    let src: Vec<usize> = (0..200).map(|i| 4 + i % (V - 4)).collect();
    assert_eq!(model.encode_sentence(&src).unwrap().shape(), &[64, 64]);
}

#[test]
fn empty_source_is_rejected() {
    let model = Model::<f64>::new(desk(1)).unwrap();
    assert!(model.encode_sentence(&[]).is_err());
}

#[test]
fn identical_sentences_encode_identically() {
    let model = Model::<f64>::new(desk(2)).unwrap();
    let s = vec![5, 9, 11, 4];
    let h = hidden(&model, &[s.clone(), s]);
    let n = h.len() / 2;
    assert_eq!(h[..n], h[n..]);
}

#[test]
fn swapping_tokens_changes_encoding() {
    let model = Model::<f64>::new(desk(3)).unwrap();
    let a = hidden(&model, &[vec![5, 9, 11]]);
    let b = hidden(&model, &[vec![9, 5, 11]]);
    assert!(a.iter().zip(&b).any(|(x, y)| max_abs_diff(x, y) > 1e-9));
    // Same bag of tokens, so only position information tells them apart.
    assert!(max_abs_diff(&a[2], &b[2]) > 1e-9);
}

#[test]
fn decoder_is_causal() {
    let model = Model::<f64>::new(desk(4)).unwrap();
    let src = vec![vec![5, 6, 7, 8]];
    let base = vec![BOS, 10, 11, 12, 13, 14];
    let (before, _) = logits(&model, &src, std::slice::from_ref(&base));
    for t in 1..base.len() {
        let mut changed = base.clone();
        for tok in changed.iter_mut().skip(t) {
            *tok = 4 + (*tok + 7) % (V - 4);
        }
        let (after, _) = logits(&model, &src, &[changed]);
        for pos in 0..t {
            assert!(max_abs_diff(&before[pos], &after[pos]) == 0.0, "position {pos} saw token {t}");
        }
        assert!(max_abs_diff(&before[t], &after[t]) > 0.0);
    }
}

#[test]
fn padding_does_not_change_logits() {
    let model = Model::<f64>::new(desk(5)).unwrap();
    let mut rng = RngStream::new(5);
    let src = random_sentences(4, V, 4, 9, &mut rng);
    let tgt: Vec<Vec<usize>> = random_sentences(4, V, 4, 9, &mut rng)
        .into_iter()
        .map(|t| std::iter::once(BOS).chain(t).collect())
        .collect();
    let (batched, len) = logits(&model, &src, &tgt);
    for (b, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let (alone, _) = logits(&model, std::slice::from_ref(s), std::slice::from_ref(t));
        for (i, row) in alone.iter().enumerate() {
            assert!(max_abs_diff(row, &batched[b * len + i]) < 1e-5);
        }
    }
}

#[test]
fn fresh_model_loss_is_near_uniform() {
    let model = Model::<f64>::new(desk(6)).unwrap();
    let corpus = copy_corpus(64, 6);
    let loss = corpus_loss(&model, &corpus, false, 32).unwrap();
    let uniform = (V as f64).ln();
    assert!((loss - uniform).abs() <= 0.1 * uniform, "loss {loss} vs ln V {uniform}");
}

#[test]
fn training_is_deterministic() {
    let corpus = copy_corpus(64, 7);
    let cfg = TrainConfig {
        backbone_updates: 30,
        eval_every: 10,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Model::<f64>::new(desk(7)).unwrap();
        let mut log = Vec::new();
        let r = train_backbone(&mut m, &corpus, &corpus, &cfg, 7, false, StageLogs { train: Some(&mut log), routing: None }).unwrap();
        (r, m.backbone_hash(), String::from_utf8(log).unwrap())
    };
    let (r1, h1, l1) = run();
    let (r2, h2, l2) = run();
    assert_eq!(r1, r2);
    assert_eq!(h1, h2);
    let strip = |s: &str| -> Vec<(u64, f64)> {
        s.lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (v["step"].as_u64().unwrap(), v["loss"].as_f64().unwrap())
            })
            .collect()
    };
    assert_eq!(strip(&l1), strip(&l2));
}

struct CopyRun {
    model: Model<f32>,
    report: StageReport,
    dev: ParallelCorpus,
}

fn copy_run(setup: &CopySetup) -> CopyRun {
    let all = copy_corpus(setup.train + 100, 11);
    let train = ParallelCorpus::new(all.pairs[..setup.train].to_vec());
    let dev = ParallelCorpus::new(all.pairs[setup.train..].to_vec());
    let cfg = TrainConfig {
        backbone_updates: COPY_UPDATES,
        eval_every: 200,
        ..TrainConfig::default()
    };
    let mut model = Model::<f32>::new(ModelConfig {
        dropout: setup.dropout,
        ..desk(11)
    })
    .unwrap();
    let report = train_backbone(&mut model, &train, &dev, &cfg, 11, false, StageLogs::default()).unwrap();
    CopyRun { model, report, dev }
}

fn small_copy() -> &'static CopyRun {
    static RUN: OnceLock<CopyRun> = OnceLock::new();
    RUN.get_or_init(|| copy_run(&SMALL_COPY))
}

fn large_copy() -> &'static CopyRun {
    static RUN: OnceLock<CopyRun> = OnceLock::new();
    RUN.get_or_init(|| copy_run(&LARGE_COPY))
}

fn check_copy(run: &CopyRun, setup: &CopySetup) {
    let best = run.report.best_dev_loss.unwrap();
    assert!(best < setup.dev_loss, "best dev loss {best}, trajectory {:?}", run.report.dev_losses);
    let exact = run
        .dev
        .pairs
        .iter()
        .filter(|p| run.model.translate(&p.src, 4).unwrap() == p.tgt)
        .count();
    let rate = exact as f64 / run.dev.len() as f64;
    assert!(rate >= setup.round_trip, "round-trip rate {rate}");
}

#[test]
fn small_copy_task() {
    check_copy(small_copy(), &SMALL_COPY);
}

#[test]
fn large_copy_task() {
    check_copy(large_copy(), &LARGE_COPY);
}

#[test]
fn beam_of_one_is_greedy() {
    let run = large_copy();
    let fresh = Model::<f32>::new(desk(12)).unwrap();
    for model in [&run.model, &fresh] {
        for p in run.dev.pairs.iter().take(20) {
            let greedy = model.greedy_decode(&p.src, None).unwrap();
            let beam = model.beam_decode(&p.src, 1, None).unwrap();
            assert_eq!(beam.nbest.len(), 1);
            assert_eq!(beam.best().output(), greedy.as_slice());
        }
    }
}

#[test]
fn nbest_scores_are_sorted() {
    let run = large_copy();
    let fresh = Model::<f32>::new(desk(13)).unwrap();
    for model in [&run.model, &fresh] {
        for p in run.dev.pairs.iter().take(20) {
            let out = model.beam_decode(&p.src, 5, None).unwrap();
            assert!(!out.nbest.is_empty());
            for w in out.nbest.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
            for h in &out.nbest {
                assert_eq!(h.tokens.last(), Some(&EOS));
                assert!((h.score - h.log_prob / h.tokens.len() as f64).abs() < 1e-12);
            }
        }
    }
}
