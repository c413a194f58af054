//! Plain-text corpus directories.
//!
//! A split `name` is stored as `name.src` and `name.tgt` (one tokenized
//! sentence per line) plus an optional `name.dom` with one domain tag per
//! line. Vocabularies live in `vocab.src` and `vocab.tgt`; when they are
//! missing they are built from the training split.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::vocab::Vocab;
use super::{CorpusSplits, ParallelCorpus, SentencePair};

pub const SPLITS: [&str; 4] = ["train", "dev", "test", "rnd"];

#[derive(Clone, Debug)]
pub struct CorpusFiles {
    pub dir: PathBuf,
}

impl CorpusFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CorpusFiles { dir: dir.into() }
    }

    pub fn path(&self, split: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{split}.{ext}"))
    }

    pub fn vocab_path(&self, side: &str) -> PathBuf {
        self.dir.join(format!("vocab.{side}"))
    }

    pub fn has_split(&self, split: &str) -> bool {
        self.path(split, "src").exists() && self.path(split, "tgt").exists()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_split(files: &CorpusFiles, split: &str, sv: &Vocab, tv: &Vocab) -> Result<ParallelCorpus> {
    let src = read_lines(&files.path(split, "src"))?;
    let tgt = read_lines(&files.path(split, "tgt"))?;
    if src.len() != tgt.len() {
        return Err(Error::InvalidArgument(format!(
            "{split}: {} source lines but {} target lines",
            src.len(),
            tgt.len()
        )));
    }
    let dom_path = files.path(split, "dom");
    let dom = if dom_path.exists() {
        let d = read_lines(&dom_path)?;
        if d.len() != src.len() {
            return Err(Error::InvalidArgument(format!(
                "{split}: {} domain tags for {} sentences",
                d.len(),
                src.len()
            )));
        }
        Some(d)
    } else {
        None
    };
    let pairs = src
        .iter()
        .zip(&tgt)
        .enumerate()
        .map(|(i, (s, t))| SentencePair {
            id: i as u64,
            src: sv.tokenize(s),
            tgt: tv.tokenize(t),
            domain: dom.as_ref().map(|d| d[i].clone()).filter(|d| !d.is_empty()),
        })
        .collect();
    Ok(ParallelCorpus::new(pairs))
}

/// Load a corpus directory. `train` is required; other splits are optional
/// and come back empty when absent.
pub fn read_corpus_dir(dir: &Path) -> Result<CorpusSplits> {
    let files = CorpusFiles::new(dir);
    if !files.has_split("train") {
        return Err(Error::InvalidArgument(format!(
            "{} has no train.src/train.tgt",
            dir.display()
        )));
    }
    let load_vocab = |side: &str| -> Result<Vocab> {
        let p = files.vocab_path(side);
        if p.exists() {
            Vocab::load(&p)
        } else {
            let lines = read_lines(&files.path("train", side))?;
            Ok(Vocab::from_corpus(lines.iter().map(String::as_str)))
        }
    };
    let src_vocab = load_vocab("src")?;
    let tgt_vocab = load_vocab("tgt")?;
    let mut parts = Vec::new();
    for split in SPLITS {
        parts.push(if files.has_split(split) {
            read_split(&files, split, &src_vocab, &tgt_vocab)?
        } else {
            ParallelCorpus::default()
        });
    }
    let rnd = parts.pop().unwrap_or_default();
    let test = parts.pop().unwrap_or_default();
    let dev = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    let mut domains = train.domain_tags();
    for t in test.domain_tags().into_iter().chain(dev.domain_tags()) {
        if !domains.contains(&t) {
            domains.push(t);
        }
    }
    Ok(CorpusSplits {
        train,
        dev,
        test,
        rnd,
        src_vocab,
        tgt_vocab,
        domains,
    })
}

/// Write every split with its domain file, plus both vocabularies.
pub fn write_corpus_dir(splits: &CorpusSplits, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = CorpusFiles::new(dir);
    let named = [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
        ("rnd", &splits.rnd),
    ];
    for (name, c) in named {
        write_lines(
            &files.path(name, "src"),
            c.pairs.iter().map(|p| splits.src_vocab.detokenize(&p.src)),
        )?;
        write_lines(
            &files.path(name, "tgt"),
            c.pairs.iter().map(|p| splits.tgt_vocab.detokenize(&p.tgt)),
        )?;
        write_lines(
            &files.path(name, "dom"),
            c.pairs.iter().map(|p| p.domain.clone().unwrap_or_default()),
        )?;
    }
    splits.src_vocab.save(&files.vocab_path("src"))?;
    splits.tgt_vocab.save(&files.vocab_path("tgt"))?;
    Ok(())
}
