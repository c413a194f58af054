//! Parallel corpora, the tokenizer, and the synthetic multi-domain generator.

mod io;
pub mod synth;
pub mod vocab;

pub use io::{read_corpus_dir, write_corpus_dir, CorpusFiles};
pub use synth::{generate, DomainSpec, Reorder, SynthConfig};
pub use vocab::Vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: u64,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    /// Carried for anchors and evaluation only; translation training never reads it.
    pub domain: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<Vec<usize>> {
        self.pairs.iter().map(|p| p.src.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<usize>> {
        self.pairs.iter().map(|p| p.tgt.clone()).collect()
    }

    /// Subset carrying the given domain tag.
    pub fn domain(&self, tag: &str) -> ParallelCorpus {
        ParallelCorpus::new(
            self.pairs
                .iter()
                .filter(|p| p.domain.as_deref() == Some(tag))
                .cloned()
                .collect(),
        )
    }

    /// Distinct domain tags in first-seen order.
    pub fn domain_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = Vec::new();
        for p in &self.pairs {
            if let Some(d) = &p.domain {
                if !tags.contains(d) {
                    tags.push(d.clone());
                }
            }
        }
        tags
    }
}

/// Train/dev/test splits plus the label-free mixed test set, with vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplits {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
    /// Mixed test sentences whose domain tags were shuffled and are unreliable.
    pub rnd: ParallelCorpus,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub domains: Vec<String>,
}

/// Uniform sample of `count` pairs without replacement. Indices are returned
/// in corpus order, so `count == len` yields the whole corpus unchanged.
pub fn sample_sentences(corpus: &ParallelCorpus, count: usize, rng: &mut RngStream) -> Result<ParallelCorpus> {
    let n = corpus.len();
    if count > n {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {count} sentences from a corpus of {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates
    for i in 0..count {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    let mut chosen = idx[..count].to_vec();
    chosen.sort_unstable();
    Ok(ParallelCorpus::new(
        chosen.into_iter().map(|i| corpus.pairs[i].clone()).collect(),
    ))
}
