//! BLEU-4, category purity, normalized mutual information and routing
//! statistics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::experts::argmax;
use crate::model::Model;
use crate::scalar::Scalar;

fn ngram_counts<W: std::hash::Hash + Eq + Clone>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram totals for n = 1..=4, plus
/// hypothesis and reference lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn sentence<W: std::hash::Hash + Eq + Clone>(hyp: &[W], reference: &[W]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            s.matches[n - 1] = h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for i in 0..4 {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// Score in [0, 100]; zero whenever some n-gram order has no match.
    pub fn score(&self) -> f64 {
        if self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..4)
            .map(|i| (self.matches[i] as f64 / self.totals[i] as f64).ln())
            .sum::<f64>()
            / 4.0;
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 0.0 } else { 1.0 - r / c };
        100.0 * (log_p + bp).exp()
    }
}

/// Corpus-level BLEU-4 with a single reference per hypothesis, no smoothing.
pub fn bleu4<W: std::hash::Hash + Eq + Clone>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::InvalidArgument("BLEU of an empty corpus".into()));
    }
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::sentence(h, r));
    }
    Ok(total.score())
}

/// Counts of sentences per (true domain, category).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub domains: Vec<String>,
    pub num_categories: usize,
    /// `counts[domain][category]`.
    pub counts: Vec<Vec<u64>>,
}

impl RoutingStats {
    /// Tally `(domain, category)` pairs; domains appear in sorted order.
    pub fn from_assignments<'a>(
        pairs: impl IntoIterator<Item = (&'a str, usize)>,
        num_categories: usize,
    ) -> Result<Self> {
        let mut rows: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for (d, c) in pairs {
            if c >= num_categories {
                return Err(Error::Index {
                    what: "category",
                    index: c,
                    size: num_categories,
                });
            }
            match rows.get_mut(d) {
                Some(row) => row[c] += 1,
                None => {
                    let mut row = vec![0; num_categories];
                    row[c] = 1;
                    rows.insert(d.to_string(), row);
                }
            }
        }
        let (domains, counts) = rows.into_iter().unzip();
        Ok(RoutingStats {
            domains,
            num_categories,
            counts,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Per-category count of the majority domain.
    pub fn category_maxima(&self) -> Vec<u64> {
        (0..self.num_categories)
            .map(|c| self.counts.iter().map(|r| r[c]).max().unwrap_or(0))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain");
        for c in 0..self.num_categories {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (d, row) in self.domains.iter().zip(&self.counts) {
            out.push_str(d);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// `(1/U) * sum_i max_domain count(domain, i)` over the categories.
pub fn pur(stats: &RoutingStats) -> Result<f64> {
    let u = stats.total();
    if u == 0 {
        return Err(Error::InvalidArgument("purity of an empty tally".into()));
    }
    Ok(stats.category_maxima().iter().sum::<u64>() as f64 / u as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of both entropies.
/// When both labelings have zero entropy the partitions are identical and
/// the score is 1.
pub fn nmi<A: Ord + Clone, B: Ord + Clone>(truth: &[A], pred: &[B]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels for {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("NMI of empty labelings".into()));
    }
    let n = truth.len() as f64;
    let mut joint: BTreeMap<(A, B), usize> = BTreeMap::new();
    let mut ta: BTreeMap<A, usize> = BTreeMap::new();
    let mut pb: BTreeMap<B, usize> = BTreeMap::new();
    for (a, b) in truth.iter().zip(pred) {
        *joint.entry((a.clone(), b.clone())).or_default() += 1;
        *ta.entry(a.clone()).or_default() += 1;
        *pb.entry(b.clone()).or_default() += 1;
    }
    let ht = entropy(ta.values().copied(), n);
    let hp = entropy(pb.values().copied(), n);
    if ht == 0.0 && hp == 0.0 {
        return Ok(1.0);
    }
    if ht == 0.0 || hp == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|((a, b), &c)| {
            let pab = c as f64 / n;
            let pa = ta[a] as f64 / n;
            let pbv = pb[b] as f64 / n;
            pab * (pab / (pa * pbv)).ln()
        })
        .sum();
    Ok((mi / ((ht + hp) / 2.0)).clamp(0.0, 1.0))
}

/// Route every tagged sentence of `corpus` by discriminator argmax and tally
/// domain against category. Untagged sentences are skipped with a warning.
pub fn routing_stats<T: Scalar>(model: &Model<T>, corpus: &ParallelCorpus, batch_size: usize) -> Result<RoutingStats> {
    let tagged: Vec<_> = corpus.pairs.iter().filter(|p| p.domain.is_some()).collect();
    let skipped = corpus.len() - tagged.len();
    if skipped > 0 {
        log::warn!("{skipped} sentences without a domain tag excluded from routing statistics");
    }
    let src: Vec<Vec<usize>> = tagged.iter().map(|p| p.src.clone()).collect();
    let scores = model.score_sentences(&src, batch_size)?;
    RoutingStats::from_assignments(
        tagged
            .iter()
            .zip(&scores)
            .map(|(p, s)| (p.domain.as_deref().unwrap_or_default(), argmax(s))),
        model.config.num_experts,
    )
}

/// BLEU, purity and NMI for one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub bleu: f64,
    pub pur: Option<f64>,
    pub nmi: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_is_100() {
        let h = vec![toks("a b c d e")];
        assert!((bleu4(&h, &h).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_is_0() {
        let h = vec![toks("a b c d")];
        let r = vec![toks("e f g h")];
        assert_eq!(bleu4(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn clipped_unigrams() {
        let s = BleuStats::sentence(&toks("the the the cat"), &toks("the cat sat down"));
        assert_eq!(s.matches[0], 2);
        assert_eq!(s.totals[0], 4);
    }

    #[test]
    fn empty_corpus_is_error() {
        let e: Vec<Vec<&str>> = vec![];
        assert!(bleu4(&e, &e).is_err());
    }

    #[test]
    fn pur_example() {
        let s = RoutingStats::from_assignments(
            [("A", 0), ("A", 0), ("A", 0), ("B", 0), ("B", 1), ("B", 1)],
            2,
        )
        .unwrap();
        assert!((pur(&s).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(s.to_csv(), "domain,0,1\nA,3,0\nB,1,2\n");
    }

    #[test]
    fn nmi_edge_cases() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 1, 1], &[3, 3, 3, 3]).unwrap(), 0.0);
        assert_eq!(nmi(&[2, 2], &[9, 9]).unwrap(), 1.0);
        assert!(nmi(&[0], &[0, 1]).is_err());
    }
}
