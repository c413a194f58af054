//! Deterministic synthetic multi-domain parallel corpora.
//!
//! Every domain owns a block of exclusive source words and shares a common
//! pool with the others. A target sentence is the source mapped word by word
//! (shared words translate differently per domain) followed by a
//! domain-specific reordering, so a single generic model has to infer the
//! domain to translate well.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

use super::vocab::Vocab;
use super::{CorpusSplits, ParallelCorpus, SentencePair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorder {
    Identity,
    Reverse,
    /// Swap positions (0,1), (2,3), ...
    SwapPairs,
    /// Move the first `n` words to the end.
    RotateLeft(usize),
}

impl Reorder {
    pub fn apply<X: Clone>(&self, xs: &[X]) -> Vec<X> {
        let mut v = xs.to_vec();
        match *self {
            Reorder::Identity => {}
            Reorder::Reverse => v.reverse(),
            Reorder::SwapPairs => {
                for pair in v.chunks_mut(2) {
                    if pair.len() == 2 {
                        pair.swap(0, 1);
                    }
                }
            }
            Reorder::RotateLeft(n) => {
                if !v.is_empty() {
                    let n = n % v.len();
                    v.rotate_left(n);
                }
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub tag: String,
    /// Number of source words only this domain uses.
    pub exclusive_vocab: usize,
    /// Probability that a word is drawn from the shared pool; 0 gives
    /// vocabulary-disjoint domains, 1 gives indistinguishable sources.
    pub mixing_ratio: f64,
    pub reorder: Reorder,
    /// Sentence length is uniform on `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub domains: Vec<DomainSpec>,
    pub shared_vocab: usize,
    /// Sentences drawn from each domain's test split into the mixed test set.
    pub rnd_per_domain: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// One large generic domain and three small ones.
    pub fn four_domain(mixing_ratio: f64, generic_train: usize, small_train: usize, seed: u64) -> Self {
        let reorders = [
            Reorder::Identity,
            Reorder::Reverse,
            Reorder::SwapPairs,
            Reorder::RotateLeft(1),
        ];
        let tags = ["generic", "law", "med", "it"];
        let domains = tags
            .iter()
            .zip(reorders)
            .enumerate()
            .map(|(i, (tag, reorder))| DomainSpec {
                tag: tag.to_string(),
                exclusive_vocab: 24,
                mixing_ratio,
                reorder,
                min_len: 4,
                max_len: 9,
                train: if i == 0 { generic_train } else { small_train },
                dev: 100,
                test: 100,
            })
            .collect();
        SynthConfig {
            domains,
            shared_vocab: 24,
            rnd_per_domain: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        let mut tags = HashSet::new();
        for d in &self.domains {
            if !tags.insert(d.tag.as_str()) {
                return Err(Error::Config(format!("duplicate domain tag {}", d.tag)));
            }
            if d.tag.is_empty() || d.tag.contains(char::is_whitespace) {
                return Err(Error::Config(format!("domain tag {:?} must be a single word", d.tag)));
            }
            if !(0.0..=1.0).contains(&d.mixing_ratio) {
                return Err(Error::Config(format!("{}: mixing ratio must lie in [0, 1]", d.tag)));
            }
            if d.min_len == 0 || d.min_len > d.max_len {
                return Err(Error::Config(format!("{}: bad length range", d.tag)));
            }
            if d.mixing_ratio < 1.0 && d.exclusive_vocab == 0 {
                return Err(Error::Config(format!(
                    "{}: mixing ratio below 1 needs exclusive vocabulary",
                    d.tag
                )));
            }
            if d.mixing_ratio > 0.0 && self.shared_vocab == 0 {
                return Err(Error::Config(format!(
                    "{}: mixing ratio above 0 needs a shared vocabulary",
                    d.tag
                )));
            }
            if self.rnd_per_domain > d.test {
                return Err(Error::Config(format!(
                    "{}: rnd_per_domain exceeds the test split",
                    d.tag
                )));
            }
        }
        Ok(())
    }
}

fn exclusive_src(domain: usize, j: usize) -> String {
    format!("x{domain}_{j}")
}

fn shared_src(j: usize) -> String {
    format!("s{j}")
}

fn exclusive_tgt(domain: usize, j: usize) -> String {
    format!("X{domain}_{j}")
}

fn shared_tgt(domain: usize, j: usize) -> String {
    format!("S{domain}_{j}")
}

/// Source and target vocabularies in a fixed order that depends only on the
/// config, so ids are stable across runs.
pub fn vocabularies(cfg: &SynthConfig) -> (Vocab, Vocab) {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    src.extend((0..cfg.shared_vocab).map(shared_src));
    for (di, d) in cfg.domains.iter().enumerate() {
        src.extend((0..d.exclusive_vocab).map(|j| exclusive_src(di, j)));
        tgt.extend((0..cfg.shared_vocab).map(|j| shared_tgt(di, j)));
        tgt.extend((0..d.exclusive_vocab).map(|j| exclusive_tgt(di, j)));
    }
    (Vocab::new(src), Vocab::new(tgt))
}

/// Target words for source words of domain `domain`.
pub fn transduce(cfg: &SynthConfig, domain: usize, src_words: &[String]) -> Result<Vec<String>> {
    let spec = cfg
        .domains
        .get(domain)
        .ok_or(Error::Index {
            what: "domain",
            index: domain,
            size: cfg.domains.len(),
        })?;
    let mapped = src_words
        .iter()
        .map(|w| map_word(domain, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(spec.reorder.apply(&mapped))
}

fn map_word(domain: usize, w: &str) -> Result<String> {
    let bad = || Error::InvalidArgument(format!("word {w:?} is not a synthetic source word"));
    if let Some(j) = w.strip_prefix('s') {
        let j: usize = j.parse().map_err(|_| bad())?;
        return Ok(shared_tgt(domain, j));
    }
    if let Some(rest) = w.strip_prefix('x') {
        let (d, j) = rest.split_once('_').ok_or_else(bad)?;
        let d: usize = d.parse().map_err(|_| bad())?;
        let j: usize = j.parse().map_err(|_| bad())?;
        return Ok(exclusive_tgt(d, j));
    }
    Err(bad())
}

fn sample_source(cfg: &SynthConfig, di: usize, rng: &mut RngStream) -> Vec<String> {
    let d = &cfg.domains[di];
    let len = d.min_len + rng.below(d.max_len - d.min_len + 1);
    (0..len)
        .map(|_| {
            let shared = d.mixing_ratio >= 1.0 || (d.mixing_ratio > 0.0 && rng.uniform() < d.mixing_ratio);
            if shared {
                shared_src(rng.below(cfg.shared_vocab))
            } else {
                exclusive_src(di, rng.below(d.exclusive_vocab))
            }
        })
        .collect()
}

/// Generate train/dev/test splits (disjoint by construction) and the mixed
/// test set whose domain tags are shuffled across its sentences.
pub fn generate(cfg: &SynthConfig) -> Result<CorpusSplits> {
    cfg.validate()?;
    let (src_vocab, tgt_vocab) = vocabularies(cfg);
    let root = RngStream::new(cfg.seed);
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut splits: [Vec<SentencePair>; 3] = Default::default();
    for (di, d) in cfg.domains.iter().enumerate() {
        let mut rng = root.derive_named("domain", di as u64);
        for (si, n) in [d.train, d.dev, d.test].into_iter().enumerate() {
            let mut made = 0;
            let mut attempts = 0usize;
            while made < n {
                attempts += 1;
                if attempts > 100 * n + 1000 {
                    return Err(Error::Config(format!(
                        "{}: vocabulary too small for {n} distinct sentences",
                        d.tag
                    )));
                }
                let words = sample_source(cfg, di, &mut rng);
                if !seen.insert(words.clone()) {
                    continue;
                }
                let tgt = transduce(cfg, di, &words)?;
                splits[si].push(SentencePair {
                    id: 0,
                    src: words.iter().map(|w| src_vocab.id(w)).collect(),
                    tgt: tgt.iter().map(|w| tgt_vocab.id(w)).collect(),
                    domain: Some(d.tag.clone()),
                });
                made += 1;
            }
        }
    }
    // interleave domains in the training split so batches are mixed
    let mut shuffle_rng = root.derive_named("shuffle", 0);
    shuffle_rng.shuffle(&mut splits[0]);
    let [mut train, mut dev, mut test] = splits;
    for split in [&mut train, &mut dev, &mut test] {
        for (i, p) in split.iter_mut().enumerate() {
            p.id = i as u64;
        }
    }
    let test = ParallelCorpus::new(test);
    let mut rnd_rng = root.derive_named("rnd", 0);
    let mut rnd_pairs = Vec::new();
    for d in &cfg.domains {
        let dom = test.domain(&d.tag);
        let picked = super::sample_sentences(&dom, cfg.rnd_per_domain, &mut rnd_rng)?;
        rnd_pairs.extend(picked.pairs);
    }
    let mut tags: Vec<Option<String>> = rnd_pairs.iter().map(|p| p.domain.clone()).collect();
    rnd_rng.shuffle(&mut tags);
    for (i, (p, t)) in rnd_pairs.iter_mut().zip(tags).enumerate() {
        p.id = i as u64;
        p.domain = t;
    }
    Ok(CorpusSplits {
        train: ParallelCorpus::new(train),
        dev: ParallelCorpus::new(dev),
        test,
        rnd: ParallelCorpus::new(rnd_pairs),
        src_vocab,
        tgt_vocab,
        domains: cfg.domains.iter().map(|d| d.tag.clone()).collect(),
    })
}
