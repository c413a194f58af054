use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdmt_core::pipeline::{self, Pipeline, RunConfig, CONFIG_FILE};
use mdmt_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mdmt", version, about = "Stage-wise multi-domain translation with routed experts")]
struct Cli {
    /// TOML run configuration. Defaults to `<out-dir>/config.toml` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; per-stage seeds are re-derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Train in 64-bit with per-step finiteness and frozen-set checks.
    #[arg(long, global = true)]
    checked: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic corpus.
    GenCorpus {
        /// Target directory instead of `<out-dir>/corpus`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Stage 1: train the backbone on all training data.
    TrainBackbone,
    /// Cluster frozen encoder features into pseudo-domain labels.
    BuildDomains,
    /// Stage 2: distill the cluster labels into the discriminator.
    TrainDiscriminator,
    /// Stage 3: train routed experts on top of the frozen model.
    TrainExperts,
    /// Translate whitespace-tokenized lines.
    Translate {
        /// Input file; stdin when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score the checkpoint on the test splits and write metrics.json.
    Evaluate {
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Domain-by-category routing counts on the test split, as CSV.
    RouteStats,
    /// Run every stage and evaluate.
    RunAll,
    /// Train and evaluate one model per routing setting in `[sweep]`.
    Sweep,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let implicit = cli.out_dir.as_ref().map(|d| d.join(CONFIG_FILE));
    let mut config = match (&cli.config, implicit) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(&p)?,
        _ => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds.master = seed;
        config.seeds.backbone = None;
        config.seeds.clustering = None;
        config.seeds.discriminator = None;
        config.seeds.experts = None;
    }
    if let Some(d) = &cli.out_dir {
        config.run.out_dir = d.clone();
    }
    if cli.checked {
        config.run.checked = true;
    }
    Ok(config)
}

fn print_json<S: serde::Serialize>(v: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn read_lines(input: Option<&Path>) -> Result<Vec<String>> {
    match input {
        Some(p) => Ok(fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .map(str::to_string)
            .collect()),
        None => io::stdin()
            .lock()
            .lines()
            .collect::<io::Result<_>>()
            .map_err(|e| Error::io("<stdin>", e)),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = resolve_config(&cli)?;
    match cli.command {
        Command::GenCorpus { dir: Some(dir) } => {
            let splits = mdmt_core::corpus::generate(&config.corpus.synth)?;
            mdmt_core::corpus::write_corpus_dir(&splits, &dir)?;
            log::info!("wrote {} training pairs to {}", splits.train.len(), dir.display());
        }
        Command::GenCorpus { dir: None } => {
            let splits = Pipeline::open(config)?.gen_corpus()?;
            log::info!("wrote {} training pairs", splits.train.len());
        }
        Command::TrainBackbone => print_json(&Pipeline::open(config)?.train_backbone()?)?,
        Command::BuildDomains => print_json(&Pipeline::open(config)?.build_domains()?)?,
        Command::TrainDiscriminator => print_json(&Pipeline::open(config)?.train_discriminator()?)?,
        Command::TrainExperts => print_json(&Pipeline::open(config)?.train_experts()?)?,
        Command::Translate { input, output, beam } => {
            if let Some(b) = beam {
                config.run.beam_size = b;
            }
            let lines = read_lines(input.as_deref())?;
            let out = Pipeline::open(config)?.translate(&lines)?;
            let mut text = out.join("\n");
            if !out.is_empty() {
                text.push('\n');
            }
            match output {
                Some(p) => fs::write(&p, text).map_err(|e| Error::io(&p, e))?,
                None => io::stdout()
                    .write_all(text.as_bytes())
                    .map_err(|e| Error::io("<stdout>", e))?,
            }
        }
        Command::Evaluate { beam } => {
            if let Some(b) = beam {
                config.run.beam_size = b;
            }
            print_json(&Pipeline::open(config)?.evaluate()?)?
        }
        Command::RouteStats => print!("{}", Pipeline::open(config)?.route_stats()?.to_csv()),
        Command::RunAll => print_json(&Pipeline::open(config)?.run_all()?)?,
        Command::Sweep => {
            let rows = pipeline::run_sweep(&config)?;
            println!("{}", pipeline::SweepRow::CSV_HEADER);
            for r in rows {
                println!("{}", r.to_csv());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
