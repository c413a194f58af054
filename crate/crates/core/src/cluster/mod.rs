//! Label-free domain modelling: embed sampled sentences with the frozen
//! encoder, reduce them with PCA, cluster into `K` groups and hand the hard
//! labels to discriminator training.

mod gmm;
mod kmeans;
mod pca;

pub use gmm::{cholesky, Gmm, COVARIANCE_REG};
pub use kmeans::KMeans;
pub use pca::{symmetric_eigen, PcaModel};

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    #[default]
    Gmm,
    KMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ClusterModel {
    Gmm(Gmm),
    KMeans(KMeans),
}

impl ClusterModel {
    /// Best of `restarts` independent fits: highest log-likelihood for the
    /// mixture, lowest inertia for K-Means.
    pub fn fit(
        x: &[Vec<f64>],
        k: usize,
        method: ClusterMethod,
        max_iter: usize,
        tol: f64,
        restarts: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut best: Option<(f64, ClusterModel)> = None;
        for _ in 0..restarts.max(1) {
            let (score, m) = match method {
                ClusterMethod::Gmm => {
                    let g = Gmm::fit(x, k, max_iter, tol, rng)?;
                    (g.log_likelihoods.last().copied().unwrap_or(f64::NEG_INFINITY), ClusterModel::Gmm(g))
                }
                ClusterMethod::KMeans => {
                    let km = KMeans::fit(x, k, max_iter, rng)?;
                    (-km.inertia(x), ClusterModel::KMeans(km))
                }
            };
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, m));
            }
        }
        Ok(best.expect("at least one fit").1)
    }

    pub fn num_clusters(&self) -> usize {
        match self {
            ClusterModel::Gmm(g) => g.weights.len(),
            ClusterModel::KMeans(k) => k.centroids.len(),
        }
    }

    pub fn predict_all(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        match self {
            ClusterModel::Gmm(g) => g.predict_all(x),
            ClusterModel::KMeans(k) => Ok(x.iter().map(|p| k.predict(p)).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub method: ClusterMethod,
    /// Sentences sampled from the training corpus.
    pub sample_count: usize,
    /// Reduced dimension; `None` keeps `min(64, d)`.
    pub pca_dim: Option<usize>,
    pub max_iter: usize,
    /// Relative log-likelihood change that ends EM.
    pub tol: f64,
    /// Independent initializations; the best fit is kept.
    pub restarts: usize,
    pub batch_size: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            method: ClusterMethod::Gmm,
            sample_count: 2000,
            pca_dim: None,
            max_iter: 200,
            tol: 1e-4,
            restarts: 5,
            batch_size: 64,
        }
    }
}

/// Domain-labelled sentences added to the clustering sample.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub entries: Vec<(String, String)>,
}

impl AnchorSet {
    /// Parse `sentence<TAB>domain_tag` lines; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (s, d) = line.rsplit_once('\t').ok_or_else(|| {
                Error::InvalidArgument(format!("anchor line {}: expected sentence<TAB>domain", n + 1))
            })?;
            entries.push((s.trim().to_string(), d.trim().to_string()));
        }
        Ok(AnchorSet { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_tsv(&self) -> String {
        self.entries.iter().map(|(s, d)| format!("{s}\t{d}\n")).collect()
    }

    /// The first `per_domain` sentences of each tagged domain in `corpus`.
    pub fn from_corpus(corpus: &ParallelCorpus, vocab: &Vocab, per_domain: usize) -> Self {
        let mut entries = Vec::new();
        for tag in corpus.domain_tags() {
            for p in corpus.domain(&tag).pairs.iter().take(per_domain) {
                entries.push((vocab.detokenize(&p.src), tag.clone()));
            }
        }
        AnchorSet { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    /// Corpus id for sampled sentences, position in the anchor set for anchors.
    pub sentence_id: u64,
    pub src: Vec<usize>,
    pub label: usize,
    pub anchor: bool,
    /// Known tag, used only to report clustering quality.
    pub domain: Option<String>,
}

/// Discriminator training set: every clustered sentence with its hard label.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub num_categories: usize,
    pub items: Vec<LabeledSentence>,
}

impl DomainDataset {
    pub fn sources(&self) -> Vec<Vec<usize>> {
        self.items.iter().map(|i| i.src.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for item in &self.items {
            serde_json::to_writer(&mut out, item)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path, num_categories: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let items = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<LabeledSentence>, _>>()?;
        if let Some(bad) = items.iter().find(|i| i.label >= num_categories) {
            return Err(Error::Index {
                what: "cluster label",
                index: bad.label,
                size: num_categories,
            });
        }
        Ok(DomainDataset { num_categories, items })
    }
}

/// Fitted reduction and clustering models, reused for later analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterArtifacts {
    pub pca: PcaModel,
    pub cluster: ClusterModel,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactManifest {
    method: ClusterMethod,
    num_categories: usize,
    input_dim: usize,
    reduced_dim: usize,
    num_sampled: usize,
    num_anchors: usize,
    files: Vec<String>,
}

pub const PCA_FILE: &str = "pca.json";
pub const CLUSTER_FILE: &str = "cluster.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<S: serde::de::DeserializeOwned>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl ClusterArtifacts {
    /// Reduce then assign features `(n, d)`.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        let z = self.pca.transform(features)?;
        self.cluster.predict_all(&z)
    }

    pub fn save(&self, dir: &Path, dataset: &DomainDataset) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(PCA_FILE), &self.pca)?;
        write_json(&dir.join(CLUSTER_FILE), &self.cluster)?;
        dataset.save_jsonl(&dir.join(DATASET_FILE))?;
        let manifest = ArtifactManifest {
            method: match self.cluster {
                ClusterModel::Gmm(_) => ClusterMethod::Gmm,
                ClusterModel::KMeans(_) => ClusterMethod::KMeans,
            },
            num_categories: self.cluster.num_clusters(),
            input_dim: self.pca.input_dim(),
            reduced_dim: self.pca.output_dim(),
            num_sampled: dataset.items.iter().filter(|i| !i.anchor).count(),
            num_anchors: dataset.items.iter().filter(|i| i.anchor).count(),
            files: [PCA_FILE, CLUSTER_FILE, DATASET_FILE].map(String::from).to_vec(),
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, DomainDataset)> {
        let manifest: ArtifactManifest = read_json(&dir.join(MANIFEST_FILE))?;
        let pca: PcaModel = read_json(&dir.join(PCA_FILE))?;
        let cluster: ClusterModel = read_json(&dir.join(CLUSTER_FILE))?;
        if cluster.num_clusters() != manifest.num_categories || pca.output_dim() != manifest.reduced_dim {
            return Err(Error::Integrity(format!(
                "cluster artifacts in {} disagree with their manifest",
                dir.display()
            )));
        }
        let dataset = DomainDataset::load_jsonl(&dir.join(DATASET_FILE), manifest.num_categories)?;
        Ok((ClusterArtifacts { pca, cluster }, dataset))
    }
}

pub(crate) fn tensor_rows<T: Scalar>(t: &crate::tensor::Tensor<T>) -> Vec<Vec<f64>> {
    let (n, _) = t.as_matrix_dims();
    (0..n)
        .map(|i| t.row(i).iter().map(|v| v.to_f64_lossy()).collect())
        .collect()
}

/// Sample, embed, reduce and cluster; anchors are appended to the sample
/// and clustered like any other sentence.
pub fn build_discriminator_dataset<T: Scalar>(
    model: &Model<T>,
    corpus: &ParallelCorpus,
    anchors: &AnchorSet,
    src_vocab: &Vocab,
    cfg: &ClusteringConfig,
    seed: u64,
) -> Result<(DomainDataset, ClusterArtifacts)> {
    let k = model.config.num_experts;
    let root = RngStream::new(seed);
    let count = cfg.sample_count.min(corpus.len());
    if count < cfg.sample_count {
        log::warn!(
            "clustering sample reduced to the corpus size {count} (requested {})",
            cfg.sample_count
        );
    }
    let sample = crate::corpus::sample_sentences(corpus, count, &mut root.derive_named("cluster.sample", 0))?;
    let mut items: Vec<LabeledSentence> = sample
        .pairs
        .iter()
        .map(|p| LabeledSentence {
            sentence_id: p.id,
            src: p.src.clone(),
            label: 0,
            anchor: false,
            domain: p.domain.clone(),
        })
        .collect();
    for (i, (s, tag)) in anchors.entries.iter().enumerate() {
        let src = src_vocab.tokenize(s);
        if src.is_empty() {
            log::warn!("anchor {i} is empty; skipped");
            continue;
        }
        items.push(LabeledSentence {
            sentence_id: i as u64,
            src,
            label: 0,
            anchor: true,
            domain: Some(tag.clone()),
        });
    }
    let srcs: Vec<Vec<usize>> = items.iter().map(|i| i.src.clone()).collect();
    let features = tensor_rows(&model.sentence_features(&srcs, cfg.batch_size)?);
    let d = model.config.model_dim;
    let r = cfg.pca_dim.unwrap_or(64.min(d));
    let pca = PcaModel::fit(&features, r)?;
    let reduced = pca.transform(&features)?;
    let cluster = ClusterModel::fit(
        &reduced,
        k,
        cfg.method,
        cfg.max_iter,
        cfg.tol,
        cfg.restarts,
        &mut root.derive_named("cluster.fit", 0),
    )?;
    let labels = cluster.predict_all(&reduced)?;
    for (item, l) in items.iter_mut().zip(labels) {
        item.label = l;
    }
    Ok((
        DomainDataset {
            num_categories: k,
            items,
        },
        ClusterArtifacts { pca, cluster },
    ))
}
