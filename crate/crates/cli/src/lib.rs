//! The `choreo` command line: synthetic data, preprocessing, tokenizer and
//! transformer training, generation, evaluation, rendering and the loss ablation.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod error;
pub mod render;

use std::path::PathBuf;

use choreo_core::dataset::Split;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::ConditionFiles;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "choreo", version, about = "Multi-conditional dance generation toolkit")]
pub struct Cli {
    /// TOML run config; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the run, synthetic-data and metric seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural dataset and its manifest.
    SynthData,

    /// Clean, filter and clip a dataset into a new manifest.
    Preprocess {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },

    /// Train the motion tokenizer.
    TrainRvq {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },

    /// Train the masked transformer on a frozen tokenizer.
    TrainMct {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        rvq: Option<PathBuf>,
    },

    /// Generate from condition files, or from every sample of a manifest split.
    Generate {
        #[arg(long)]
        rvq: Option<PathBuf>,
        #[arg(long)]
        mct: Option<PathBuf>,
        #[arg(long)]
        music: Option<PathBuf>,
        #[arg(long)]
        keypoints: Option<PathBuf>,
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        text: Option<PathBuf>,
        /// Output length when no frame-aligned condition is given.
        #[arg(long)]
        frames: Option<usize>,
        /// Generate for a whole split (music and text only) instead.
        #[arg(long, conflicts_with_all = ["music", "keypoints", "trajectory", "text", "frames"])]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test", requires = "manifest")]
        split: SplitArg,
    },

    /// Score a generated manifest against a reference manifest.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },

    /// Draw stick-figure PNGs for a motion file.
    Render {
        #[arg(long)]
        motion: PathBuf,
        #[arg(long, default_value_t = 1)]
        every_n: usize,
        #[arg(long, default_value_t = 256)]
        size: u32,
    },

    /// Train the loss-term grid and score each row.
    Ablate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        rvq: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Validation(format!("no {what} given (flag or [paths] entry)")))
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
        cfg.metrics.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `argv` minus the program name and the global flags. Together with the
/// `<verb>.config.toml` echo it reproduces the run.
pub fn replay_args(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if ["--config", "--seed", "--out"].contains(&a.as_str()) {
            it.next();
        } else if !["--config=", "--seed=", "--out="].iter().any(|p| a.starts_with(p)) {
            out.push(a.clone());
        }
    }
    out
}

impl Command {
    pub fn verb(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Preprocess { .. } => "preprocess",
            Command::TrainRvq { .. } => "train-rvq",
            Command::TrainMct { .. } => "train-mct",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Render { .. } => "render",
            Command::Ablate { .. } => "ablate",
        }
    }
}

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let verb = cli.command.verb();
    let out = cli.out.clone();
    dispatch(cli)?;
    commands::record_replay_args(&out, verb, &replay_args(argv))
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let out = cli.out.as_path();
    let paths = &cfg.paths;
    match cli.command {
        Command::SynthData => {
            let m = commands::synth_data(&cfg, out)?;
            println!("wrote {} sequences to {}", m.samples.len(), out.display());
        }
        Command::Preprocess { manifest } => {
            let manifest = pick(manifest, &paths.manifest, "manifest")?;
            let (m, counts) = commands::preprocess_cmd(&cfg, &manifest, out)?;
            println!("{} clips from {} sequences", m.samples.len(), counts.input);
        }
        Command::TrainRvq { manifest } => {
            let manifest = pick(manifest, &paths.manifest, "manifest")?;
            let path = commands::train_rvq_cmd(&cfg, &manifest, out)?;
            println!("{}", path.display());
        }
        Command::TrainMct { manifest, rvq } => {
            let manifest = pick(manifest, &paths.manifest, "manifest")?;
            let rvq = pick(rvq, &paths.rvq_checkpoint, "tokenizer checkpoint")?;
            let path = commands::train_mct_cmd(&cfg, &manifest, &rvq, out)?;
            println!("{}", path.display());
        }
        Command::Generate {
            rvq,
            mct,
            music,
            keypoints,
            trajectory,
            text,
            frames,
            manifest,
            split,
        } => {
            let rvq = pick(rvq, &paths.rvq_checkpoint, "tokenizer checkpoint")?;
            let mct = pick(mct, &paths.mct_checkpoint, "transformer checkpoint")?;
            match manifest {
                Some(manifest) => {
                    let m = commands::generate_split_cmd(&cfg, &rvq, &mct, &manifest, split.into(), out)?;
                    println!("generated {} samples into {}", m.samples.len(), out.display());
                }
                None => {
                    let files = ConditionFiles {
                        music,
                        keypoints,
                        trajectory,
                        text,
                        frames,
                    };
                    let path = commands::generate_cmd(&cfg, &rvq, &mct, &files, out)?;
                    println!("{}", path.display());
                }
            }
        }
        Command::Evaluate { generated, reference } => {
            let report = commands::evaluate_cmd(&cfg, &generated, &reference, out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Render { motion, every_n, size } => {
            let files = commands::render_cmd(&cfg, &motion, every_n, size, out)?;
            println!("wrote {} frames to {}", files.len(), out.display());
        }
        Command::Ablate { manifest, rvq, seeds } => {
            if seeds.is_empty() {
                return Err(CliError::Validation("--seeds must list at least one seed".into()));
            }
            let manifest = pick(manifest, &paths.manifest, "manifest")?;
            let rvq = pick(rvq, &paths.rvq_checkpoint, "tokenizer checkpoint")?;
            print!("{}", commands::ablate_cmd(&cfg, &manifest, &rvq, &seeds, out)?);
        }
    }
    Ok(())
}
