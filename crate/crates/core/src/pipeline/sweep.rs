use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_json, Pipeline, RunConfig, SweepSection, CHECKPOINT_FILE, CLUSTER_DIR, CORPUS_DIR};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

const SWEEP_DIR: &str = "sweep";

/// One routing configuration to train experts for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub routing_k: usize,
    pub temperature: f64,
    pub num_experts: usize,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        format!("K{}-k{}-t{}", self.num_experts, self.routing_k, self.temperature)
    }

    fn same(&self, o: &SweepPoint) -> bool {
        self.routing_k == o.routing_k
            && self.num_experts == o.num_experts
            && self.temperature.to_bits() == o.temperature.to_bits()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub point: SweepPoint,
    pub avg_bleu: f64,
    pub avg_loss: f64,
    pub dev_avg_loss: f64,
    pub rnd_bleu: Option<f64>,
    pub pur: Option<f64>,
    pub nmi: Option<f64>,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "num_experts,routing_k,temperature,avg_bleu,avg_loss,dev_avg_loss,rnd_bleu,pur,nmi";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.point.num_experts,
            self.point.routing_k,
            self.point.temperature,
            self.avg_bleu,
            self.avg_loss,
            self.dev_avg_loss,
            opt(self.rnd_bleu),
            opt(self.pur),
            opt(self.nmi)
        )
    }
}

/// Points to evaluate. By default each listed axis is varied on its own with
/// the others held at the base config; with `grid` every combination is
/// taken. `routing_k` is clamped to the number of experts and duplicates are
/// dropped.
pub fn expand_sweep(base: &ModelConfig, s: &SweepSection) -> Vec<SweepPoint> {
    let origin = SweepPoint {
        routing_k: base.routing_k,
        temperature: base.temperature,
        num_experts: base.num_experts,
    };
    let mut raw = Vec::new();
    if s.grid {
        let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
        let ts = if s.temperature.is_empty() { vec![base.temperature] } else { s.temperature.clone() };
        for &num_experts in &or(&s.num_experts, base.num_experts) {
            for &routing_k in &or(&s.routing_k, base.routing_k) {
                for &temperature in &ts {
                    raw.push(SweepPoint {
                        routing_k,
                        temperature,
                        num_experts,
                    });
                }
            }
        }
    } else {
        raw.push(origin);
        raw.extend(s.num_experts.iter().map(|&num_experts| SweepPoint { num_experts, ..origin }));
        raw.extend(s.routing_k.iter().map(|&routing_k| SweepPoint { routing_k, ..origin }));
        raw.extend(s.temperature.iter().map(|&temperature| SweepPoint { temperature, ..origin }));
    }
    let mut out: Vec<SweepPoint> = Vec::new();
    for mut p in raw {
        p.routing_k = p.routing_k.clamp(1, p.num_experts.max(1));
        if !out.iter().any(|q| q.same(&p)) {
            out.push(p);
        }
    }
    out
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for entry in fs::read_dir(from).map_err(|e| Error::io(from, e))? {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let dst = to.join(entry.file_name());
        fs::copy(entry.path(), &dst).map_err(|e| Error::io(&dst, e))?;
    }
    Ok(())
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).map(|_| ()).map_err(|e| Error::io(to, e))
}

/// Train the backbone once in `out_dir` (reusing an existing one), then
/// clustering and the discriminator once per expert count, then experts and
/// evaluation for every point. Writes `sweep.jsonl` and `sweep.csv`.
pub fn run_sweep(config: &RunConfig) -> Result<Vec<SweepRow>> {
    let points = expand_sweep(&config.model, &config.sweep);
    let base = Pipeline::open(config.clone())?;
    let backbone_done = base.load_checkpoint().map(|c| c.stages.backbone).unwrap_or(false);
    if backbone_done {
        log::info!("reusing backbone in {}", base.dir.display());
    } else {
        base.train_backbone()?;
    }
    base.corpus()?;
    let mut shared = base.config.clone();
    shared.corpus.dir = Some(config.corpus.dir.clone().unwrap_or_else(|| base.path(CORPUS_DIR)));
    let root = base.path(SWEEP_DIR);

    let mut discriminators: BTreeMap<usize, std::path::PathBuf> = BTreeMap::new();
    let mut rows = Vec::with_capacity(points.len());
    for p in &points {
        if !discriminators.contains_key(&p.num_experts) {
            let dir = root.join(format!("K{}", p.num_experts));
            let mut cfg = shared.clone();
            cfg.run.out_dir = dir.clone();
            cfg.model.num_experts = p.num_experts;
            cfg.model.routing_k = cfg.model.routing_k.min(p.num_experts);
            let pl = Pipeline::open(cfg)?;
            copy_file(&base.path(CHECKPOINT_FILE), &pl.path(CHECKPOINT_FILE))?;
            pl.build_domains()?;
            pl.train_discriminator()?;
            discriminators.insert(p.num_experts, dir);
        }
        let src = &discriminators[&p.num_experts];
        let mut cfg = shared.clone();
        cfg.run.out_dir = root.join(p.label());
        cfg.model.num_experts = p.num_experts;
        cfg.model.routing_k = p.routing_k;
        cfg.model.temperature = p.temperature;
        let pl = Pipeline::open(cfg)?;
        copy_file(&src.join(CHECKPOINT_FILE), &pl.path(CHECKPOINT_FILE))?;
        copy_dir(&src.join(CLUSTER_DIR), &pl.path(CLUSTER_DIR))?;
        pl.train_experts()?;
        let m = pl.evaluate()?;
        log::info!("sweep point {} avg BLEU {:.2}", p.label(), m.model.avg_bleu);
        rows.push(SweepRow {
            point: *p,
            avg_bleu: m.model.avg_bleu,
            avg_loss: m.model.avg_loss,
            dev_avg_loss: m.model.dev_avg_loss,
            rnd_bleu: m.model.rnd.as_ref().map(|r| r.bleu),
            pur: m.model.test_all.pur,
            nmi: m.model.test_all.nmi,
        });
    }

    let mut jsonl = String::new();
    let mut csv = format!("{}\n", SweepRow::CSV_HEADER);
    for r in &rows {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    let jp = base.path("sweep.jsonl");
    fs::write(&jp, jsonl).map_err(|e| Error::io(&jp, e))?;
    let cp = base.path("sweep.csv");
    fs::write(&cp, csv).map_err(|e| Error::io(&cp, e))?;
    write_json(&root.join("points.json"), &points)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig::desk()
    }

    #[test]
    fn axis_mode_varies_one_axis() {
        let b = base();
        let s = SweepSection {
            routing_k: vec![1, b.routing_k, 99],
            temperature: vec![0.5, b.temperature],
            num_experts: vec![],
            grid: false,
        };
        let pts = expand_sweep(&b, &s);
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[0].routing_k, b.routing_k);
        assert!(pts.iter().all(|p| p.routing_k <= p.num_experts));
        assert!(pts.iter().all(|p| p.num_experts == b.num_experts));
    }

    #[test]
    fn grid_is_cartesian() {
        let s = SweepSection {
            routing_k: vec![1, 2],
            temperature: vec![0.5, 1.0, 2.0],
            num_experts: vec![2, 4],
            grid: true,
        };
        assert_eq!(expand_sweep(&base(), &s).len(), 12);
    }

    #[test]
    fn empty_sweep_is_the_base_point() {
        let pts = expand_sweep(&base(), &SweepSection::default());
        assert_eq!(pts.len(), 1);
    }
}
