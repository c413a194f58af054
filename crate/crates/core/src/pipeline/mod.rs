//! End-to-end orchestration of the three training stages inside one run
//! directory.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml          resolved configuration of the last command
//! corpus/              generated corpus (when no external corpus is configured)
//! checkpoint.bin       model parameters, stage flags and frozen-set hashes
//! clusters/            PCA and clustering models, labelled dataset, manifest
//! logs/<stage>.jsonl   training logs
//! routing.jsonl        routing decisions made while training experts
//! metrics.json         evaluation report
//! route_stats.{csv,json}
//! ```

mod config;
mod sweep;

pub use config::{ClusteringSection, CorpusConfig, RunConfig, RunSection, Seeds, SweepSection};
pub use sweep::{expand_sweep, run_sweep, SweepPoint, SweepRow};

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, StageFlags, BACKBONE_DISCRIMINATOR_HASH, BACKBONE_HASH};
use crate::cluster::{self, AnchorSet, ClusterArtifacts, DomainDataset};
use crate::corpus::{self, CorpusSplits, ParallelCorpus};
use crate::error::{Error, Result};
use crate::eval::{bleu4, nmi, pur, routing_stats, RoutingStats};
use crate::model::experts::argmax;
use crate::model::{Model, EXPERT_PREFIX};
use crate::scalar::Scalar;
use crate::train::{self, DiscriminatorReport, StageLogs, StageReport};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CLUSTER_DIR: &str = "clusters";
pub const CORPUS_DIR: &str = "corpus";
pub const LOG_DIR: &str = "logs";
pub const ROUTING_LOG: &str = "routing.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CLUSTER_REPORT_FILE: &str = "report.json";
pub const LOCK_FILE: &str = ".lock";

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Quality of the teacher clustering against known domain tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub num_sampled: usize,
    pub num_anchors: usize,
    pub num_categories: usize,
    pub pur: Option<f64>,
    pub nmi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScores {
    pub sentences: usize,
    pub loss: f64,
    pub bleu: f64,
}

/// Scores of one test set as a whole.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetScores {
    pub sentences: usize,
    pub bleu: f64,
    pub loss: f64,
    /// Purity and NMI of discriminator routing against the set's domain tags.
    pub pur: Option<f64>,
    pub nmi: Option<f64>,
}

/// Every number reported for one system (full model or bare backbone).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub uses_experts: bool,
    pub test: BTreeMap<String, DomainScores>,
    /// Macro averages over test domains.
    pub avg_bleu: f64,
    pub avg_loss: f64,
    pub dev_loss: BTreeMap<String, f64>,
    pub dev_avg_loss: f64,
    pub test_all: SetScores,
    pub rnd: Option<SetScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub stages: StageFlags,
    pub model: SystemReport,
    /// The frozen backbone alone, reported once experts exist.
    pub backbone: Option<SystemReport>,
    pub routing: Option<RoutingStats>,
    pub clustering: Option<ClusteringReport>,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub dir: PathBuf,
    corpus: OnceCell<CorpusSplits>,
    _lock: RunLock,
}

fn create_log(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn flush(w: &mut BufWriter<File>) -> Result<()> {
    w.flush().map_err(|e| Error::io("<log>", e))
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn macro_mean<'a>(vals: impl Iterator<Item = &'a f64>) -> f64 {
    let v: Vec<f64> = vals.copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Pipeline {
    /// Take ownership of `config.run.out_dir` and record the resolved config.
    pub fn open(mut config: RunConfig) -> Result<Self> {
        let dir = config.run.out_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let lock = RunLock::acquire(&dir)?;
        let s = &mut config.seeds;
        s.backbone = Some(s.backbone());
        s.clustering = Some(s.clustering());
        s.discriminator = Some(s.discriminator());
        s.experts = Some(s.experts());
        fs::write(dir.join(CONFIG_FILE), config.to_toml()?).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
        Ok(Pipeline {
            config,
            dir,
            corpus: OnceCell::new(),
            _lock: lock,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn checked(&self) -> bool {
        self.config.run.checked
    }

    /// Generate the configured synthetic corpus into the run directory.
    pub fn gen_corpus(&self) -> Result<CorpusSplits> {
        let splits = corpus::generate(&self.config.corpus.synth)?;
        corpus::write_corpus_dir(&splits, &self.path(CORPUS_DIR))?;
        Ok(splits)
    }

    /// The configured external corpus, or the generated one (created on
    /// first use).
    pub fn corpus(&self) -> Result<&CorpusSplits> {
        if let Some(c) = self.corpus.get() {
            return Ok(c);
        }
        let dir = match &self.config.corpus.dir {
            Some(d) => d.clone(),
            None => {
                let d = self.path(CORPUS_DIR);
                if !corpus::CorpusFiles::new(&d).has_split("train") {
                    self.gen_corpus()?;
                }
                d
            }
        };
        let splits = corpus::read_corpus_dir(&dir)?;
        Ok(self.corpus.get_or_init(|| splits))
    }

    pub fn load_checkpoint(&self) -> Result<Checkpoint> {
        let p = self.path(CHECKPOINT_FILE);
        if !p.exists() {
            return Err(Error::StageIncomplete("backbone"));
        }
        Checkpoint::load(&p)
    }

    fn save_checkpoint(&self, c: &Checkpoint) -> Result<()> {
        c.save(&self.path(CHECKPOINT_FILE))
    }

    fn anchors(&self) -> Result<AnchorSet> {
        let sec = &self.config.clustering;
        let mut a = match &sec.anchors {
            Some(p) => AnchorSet::load(p)?,
            None => AnchorSet::default(),
        };
        if sec.anchors_per_domain > 0 {
            let c = self.corpus()?;
            a.entries
                .extend(AnchorSet::from_corpus(&c.dev, &c.src_vocab, sec.anchors_per_domain).entries);
        }
        Ok(a)
    }

    /// Stage 1. Resets every later stage.
    pub fn train_backbone(&self) -> Result<StageReport> {
        let c = self.corpus()?;
        let mut cfg = self.config.model.clone();
        cfg.src_vocab = c.src_vocab.len();
        cfg.tgt_vocab = c.tgt_vocab.len();
        cfg.seed = self.config.seeds.backbone();
        if cfg.joint_vocab && c.src_vocab != c.tgt_vocab {
            return Err(Error::Config("joint_vocab needs identical source and target vocabularies".into()));
        }
        let mut log = create_log(&self.path(LOG_DIR).join("backbone.jsonl"))?;
        let seed = self.config.seeds.backbone();
        let (ckpt, report) = if self.checked() {
            backbone_stage::<f64>(cfg, c, &self.config, seed, &mut log)?
        } else {
            backbone_stage::<f32>(cfg, c, &self.config, seed, &mut log)?
        };
        flush(&mut log)?;
        let clusters = self.path(CLUSTER_DIR);
        if clusters.exists() {
            fs::remove_dir_all(&clusters).map_err(|e| Error::io(&clusters, e))?;
        }
        self.save_checkpoint(&ckpt)?;
        Ok(report)
    }

    /// Sample, embed with the frozen encoder, reduce, cluster; persist the
    /// labelled dataset and the fitted models under `clusters/`.
    pub fn build_domains(&self) -> Result<ClusteringReport> {
        let ckpt = self.load_checkpoint()?;
        ckpt.require("backbone")?;
        ckpt.verify_hash(BACKBONE_HASH)?;
        let c = self.corpus()?;
        let mut model = ckpt.model.clone();
        model.config.num_experts = self.config.model.num_experts;
        let anchors = self.anchors()?;
        let seed = self.config.seeds.clustering();
        let cc = &self.config.clustering.params;
        let (dataset, artifacts) = if self.checked() {
            cluster::build_discriminator_dataset(&model.cast::<f64>(), &c.train, &anchors, &c.src_vocab, cc, seed)?
        } else {
            cluster::build_discriminator_dataset(&model, &c.train, &anchors, &c.src_vocab, cc, seed)?
        };
        let dir = self.path(CLUSTER_DIR);
        artifacts.save(&dir, &dataset)?;
        let report = clustering_report(&dataset)?;
        write_json(&dir.join(CLUSTER_REPORT_FILE), &report)?;
        Ok(report)
    }

    /// Stage 2. Resets the expert stage.
    pub fn train_discriminator(&self) -> Result<DiscriminatorReport> {
        let mut ckpt = self.load_checkpoint()?;
        ckpt.require("backbone")?;
        ckpt.verify_hash(BACKBONE_HASH)?;
        let dir = self.path(CLUSTER_DIR);
        if !dir.join(cluster::MANIFEST_FILE).exists() {
            return Err(Error::StageIncomplete("domain clustering"));
        }
        let (_, dataset) = ClusterArtifacts::load(&dir)?;
        ckpt.model.config.num_experts = dataset.num_categories;
        ckpt.model.config.routing_k = ckpt.model.config.routing_k.min(dataset.num_categories);
        ckpt.model.params.remove_prefix(EXPERT_PREFIX);
        ckpt.stages.discriminator = false;
        ckpt.stages.experts = false;
        ckpt.frozen_hashes.remove(BACKBONE_DISCRIMINATOR_HASH);
        let seed = self.config.seeds.discriminator();
        let mut log = create_log(&self.path(LOG_DIR).join("discriminator.jsonl"))?;
        let report = if self.checked() {
            discriminator_stage::<f64>(&mut ckpt, &dataset, &self.config, seed, &mut log)?
        } else {
            discriminator_stage::<f32>(&mut ckpt, &dataset, &self.config, seed, &mut log)?
        };
        flush(&mut log)?;
        ckpt.verify_hash(BACKBONE_HASH)?;
        ckpt.stages.discriminator = true;
        ckpt.frozen_hashes
            .insert(BACKBONE_DISCRIMINATOR_HASH.into(), ckpt.model.backbone_and_discriminator_hash());
        self.save_checkpoint(&ckpt)?;
        Ok(report)
    }

    /// Stage 3.
    pub fn train_experts(&self) -> Result<StageReport> {
        let mut ckpt = self.load_checkpoint()?;
        ckpt.require("discriminator")?;
        ckpt.verify_hash(BACKBONE_HASH)?;
        ckpt.verify_hash(BACKBONE_DISCRIMINATOR_HASH)?;
        let m = &self.config.model;
        let mc = &mut ckpt.model.config;
        mc.expert_inner_dim = m.expert_inner_dim;
        mc.routing_k = m.routing_k.min(mc.num_experts);
        mc.temperature = m.temperature;
        mc.route_per_layer = m.route_per_layer;
        mc.validate()?;
        let c = self.corpus()?;
        let seed = self.config.seeds.experts();
        let mut log = create_log(&self.path(LOG_DIR).join("experts.jsonl"))?;
        let mut routing = create_log(&self.path(ROUTING_LOG))?;
        let report = if self.checked() {
            expert_stage::<f64>(&mut ckpt, c, &self.config, seed, &mut log, &mut routing)?
        } else {
            expert_stage::<f32>(&mut ckpt, c, &self.config, seed, &mut log, &mut routing)?
        };
        flush(&mut log)?;
        flush(&mut routing)?;
        ckpt.verify_hash(BACKBONE_HASH)?;
        ckpt.verify_hash(BACKBONE_DISCRIMINATOR_HASH)?;
        ckpt.stages.experts = true;
        self.save_checkpoint(&ckpt)?;
        Ok(report)
    }

    /// Translate whitespace-tokenized source lines.
    pub fn translate(&self, lines: &[String]) -> Result<Vec<String>> {
        let ckpt = self.load_checkpoint()?;
        ckpt.require("backbone")?;
        let c = self.corpus()?;
        let model = &ckpt.model;
        let mut out = Vec::with_capacity(lines.len());
        for l in lines {
            let src = c.src_vocab.tokenize(l);
            if src.is_empty() {
                out.push(String::new());
                continue;
            }
            let hyp = model.translate(&src, self.config.run.beam_size)?;
            out.push(c.tgt_vocab.detokenize(&hyp));
        }
        Ok(out)
    }

    /// Domain-by-category routing counts on the test split; also written as
    /// `route_stats.csv` and `route_stats.json`.
    pub fn route_stats(&self) -> Result<RoutingStats> {
        let ckpt = self.load_checkpoint()?;
        ckpt.require("discriminator")?;
        let c = self.corpus()?;
        let stats = routing_stats(&ckpt.model, &c.test, self.config.train.eval_batch_size)?;
        let csv = self.path("route_stats.csv");
        fs::write(&csv, stats.to_csv()).map_err(|e| Error::io(&csv, e))?;
        write_json(&self.path("route_stats.json"), &stats)?;
        Ok(stats)
    }

    /// Evaluate the checkpoint and write `metrics.json`.
    pub fn evaluate(&self) -> Result<Metrics> {
        let ckpt = self.load_checkpoint()?;
        ckpt.require("backbone")?;
        let c = self.corpus()?;
        let model = &ckpt.model;
        let beam = self.config.run.beam_size;
        let bs = self.config.train.eval_batch_size;
        let routed = model.has_experts() && ckpt.stages.experts;
        let system = system_report(model, c, routed, beam, bs)?;
        let backbone = if routed {
            Some(system_report(model, c, false, beam, bs)?)
        } else {
            None
        };
        let routing = if ckpt.stages.discriminator {
            Some(routing_stats(model, &c.test, bs)?)
        } else {
            None
        };
        let report_path = self.path(CLUSTER_DIR).join(CLUSTER_REPORT_FILE);
        let clustering = if report_path.exists() {
            let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        let metrics = Metrics {
            stages: ckpt.stages,
            model: system,
            backbone,
            routing,
            clustering,
        };
        write_json(&self.path(METRICS_FILE), &metrics)?;
        Ok(metrics)
    }

    /// All stages followed by evaluation.
    pub fn run_all(&self) -> Result<Metrics> {
        self.train_backbone()?;
        self.build_domains()?;
        self.train_discriminator()?;
        self.train_experts()?;
        self.evaluate()
    }
}

fn clustering_report(ds: &DomainDataset) -> Result<ClusteringReport> {
    let tagged: Vec<(&str, usize)> = ds
        .items
        .iter()
        .filter_map(|i| i.domain.as_deref().map(|d| (d, i.label)))
        .collect();
    let (pur_v, nmi_v) = if tagged.is_empty() {
        (None, None)
    } else {
        let stats = RoutingStats::from_assignments(tagged.iter().copied(), ds.num_categories)?;
        let truth: Vec<&str> = tagged.iter().map(|t| t.0).collect();
        let pred: Vec<usize> = tagged.iter().map(|t| t.1).collect();
        (Some(pur(&stats)?), Some(nmi(&truth, &pred)?))
    };
    Ok(ClusteringReport {
        num_sampled: ds.items.iter().filter(|i| !i.anchor).count(),
        num_anchors: ds.items.iter().filter(|i| i.anchor).count(),
        num_categories: ds.num_categories,
        pur: pur_v,
        nmi: nmi_v,
    })
}

fn backbone_stage<T: Scalar>(
    cfg: crate::model::ModelConfig,
    c: &CorpusSplits,
    rc: &RunConfig,
    seed: u64,
    log: &mut BufWriter<File>,
) -> Result<(Checkpoint, StageReport)> {
    let mut model = Model::<T>::new(cfg)?;
    let report = train::train_backbone(
        &mut model,
        &c.train,
        &c.dev,
        &rc.train,
        seed,
        rc.run.checked,
        StageLogs {
            train: Some(log),
            routing: None,
        },
    )?;
    let mut ckpt = Checkpoint::new(&model);
    ckpt.stages.backbone = true;
    ckpt.frozen_hashes
        .insert(BACKBONE_HASH.into(), ckpt.model.backbone_hash());
    Ok((ckpt, report))
}

fn discriminator_stage<T: Scalar>(
    ckpt: &mut Checkpoint,
    dataset: &DomainDataset,
    rc: &RunConfig,
    seed: u64,
    log: &mut BufWriter<File>,
) -> Result<DiscriminatorReport> {
    let mut model: Model<T> = ckpt.model();
    model.init_discriminator(seed);
    let report = train::train_discriminator(
        &mut model,
        dataset,
        &rc.train,
        seed,
        rc.run.checked,
        StageLogs {
            train: Some(log),
            routing: None,
        },
    )?;
    let config = ckpt.model.config.clone();
    ckpt.model = model.cast();
    ckpt.model.config = config;
    Ok(report)
}

fn expert_stage<T: Scalar>(
    ckpt: &mut Checkpoint,
    c: &CorpusSplits,
    rc: &RunConfig,
    seed: u64,
    log: &mut BufWriter<File>,
    routing: &mut BufWriter<File>,
) -> Result<StageReport> {
    let mut model: Model<T> = ckpt.model();
    model.init_experts(seed);
    let report = train::train_experts(
        &mut model,
        &c.train,
        &c.dev,
        &rc.train,
        seed,
        rc.run.checked,
        StageLogs {
            train: Some(log),
            routing: Some(routing),
        },
    )?;
    ckpt.model = model.cast();
    Ok(report)
}

fn decode_all<T: Scalar>(model: &Model<T>, corpus: &ParallelCorpus, routed: bool, beam: usize) -> Result<Vec<Vec<usize>>> {
    corpus
        .pairs
        .iter()
        .map(|p| {
            let expert = if routed { model.inference_expert(&p.src)? } else { None };
            Ok(model.beam_decode(&p.src, beam, expert)?.best().output().to_vec())
        })
        .collect()
}

/// Decoded outputs and per-sentence losses of a corpus, sliceable by index.
struct Decoded<'a> {
    corpus: &'a ParallelCorpus,
    hyps: Vec<Vec<usize>>,
    nll: Vec<(f64, usize)>,
}

impl<'a> Decoded<'a> {
    fn new<T: Scalar>(model: &Model<T>, corpus: &'a ParallelCorpus, routed: bool, beam: usize, bs: usize) -> Result<Self> {
        Ok(Decoded {
            corpus,
            hyps: decode_all(model, corpus, routed, beam)?,
            nll: train::sentence_losses(model, corpus, routed, bs)?,
        })
    }

    fn scores(&self, idx: &[usize]) -> Result<(f64, f64)> {
        let hyps: Vec<Vec<usize>> = idx.iter().map(|&i| self.hyps[i].clone()).collect();
        let refs: Vec<Vec<usize>> = idx.iter().map(|&i| self.corpus.pairs[i].tgt.clone()).collect();
        let total: f64 = idx.iter().map(|&i| self.nll[i].0).sum();
        let tokens: usize = idx.iter().map(|&i| self.nll[i].1).sum();
        Ok((bleu4(&hyps, &refs)?, total / tokens.max(1) as f64))
    }
}

fn indices_of(corpus: &ParallelCorpus, tag: &str) -> Vec<usize> {
    (0..corpus.len())
        .filter(|&i| corpus.pairs[i].domain.as_deref() == Some(tag))
        .collect()
}

fn routing_quality<T: Scalar>(model: &Model<T>, corpus: &ParallelCorpus, bs: usize) -> Result<(Option<f64>, Option<f64>)> {
    if !model.has_discriminator() {
        return Ok((None, None));
    }
    let tagged = ParallelCorpus::new(corpus.pairs.iter().filter(|p| p.domain.is_some()).cloned().collect());
    if tagged.is_empty() {
        return Ok((None, None));
    }
    let scores = model.score_sentences(&tagged.sources(), bs)?;
    let pred: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let truth: Vec<&str> = tagged.pairs.iter().map(|p| p.domain.as_deref().unwrap_or_default()).collect();
    let stats = RoutingStats::from_assignments(truth.iter().copied().zip(pred.iter().copied()), model.config.num_experts)?;
    Ok((Some(pur(&stats)?), Some(nmi(&truth, &pred)?)))
}

fn system_report<T: Scalar>(model: &Model<T>, c: &CorpusSplits, routed: bool, beam: usize, bs: usize) -> Result<SystemReport> {
    let tags = if c.domains.is_empty() { c.test.domain_tags() } else { c.domains.clone() };
    let test_dec = Decoded::new(model, &c.test, routed, beam, bs)?;
    let mut test = BTreeMap::new();
    for tag in &tags {
        let idx = indices_of(&c.test, tag);
        if !idx.is_empty() {
            let (bleu, loss) = test_dec.scores(&idx)?;
            test.insert(
                tag.clone(),
                DomainScores {
                    sentences: idx.len(),
                    loss,
                    bleu,
                },
            );
        }
    }
    let mut dev_loss = BTreeMap::new();
    let dev_nll = train::sentence_losses(model, &c.dev, routed, bs)?;
    for tag in &tags {
        let idx = indices_of(&c.dev, tag);
        let tokens: usize = idx.iter().map(|&i| dev_nll[i].1).sum();
        if tokens > 0 {
            dev_loss.insert(tag.clone(), idx.iter().map(|&i| dev_nll[i].0).sum::<f64>() / tokens as f64);
        }
    }
    if c.test.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs a non-empty test split".into()));
    }
    let (pur_v, nmi_v) = routing_quality(model, &c.test, bs)?;
    let (bleu, loss) = test_dec.scores(&(0..c.test.len()).collect::<Vec<_>>())?;
    let test_all = SetScores {
        sentences: c.test.len(),
        bleu,
        loss,
        pur: pur_v,
        nmi: nmi_v,
    };
    let rnd = if c.rnd.is_empty() {
        None
    } else {
        let d = Decoded::new(model, &c.rnd, routed, beam, bs)?;
        let (bleu, loss) = d.scores(&(0..c.rnd.len()).collect::<Vec<_>>())?;
        Some(SetScores {
            sentences: c.rnd.len(),
            bleu,
            loss,
            pur: None,
            nmi: None,
        })
    };
    Ok(SystemReport {
        uses_experts: routed,
        avg_bleu: macro_mean(test.values().map(|d: &DomainScores| &d.bleu)),
        avg_loss: macro_mean(test.values().map(|d: &DomainScores| &d.loss)),
        dev_avg_loss: macro_mean(dev_loss.values()),
        test,
        dev_loss,
        test_all,
        rnd,
    })
}
