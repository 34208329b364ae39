//! `lmlcc`: labeling, preprocessing, training, pseudo-labeling, evaluation
//! and Grad-CAM for lung nodule CT patches.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 non-finite values.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{CliResult, RunConfig, SEED_ENV};

#[derive(Parser, Debug)]
#[command(name = "lmlcc", version, about = "Lung nodule malignancy classification pipeline")]
struct Cli {
    /// Flat key=value config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice. Falls back to the config file, then LMLCC_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long, value_parser = ["backbone", "lmlcc"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["desk", "full"])]
    scale: Option<String>,
    #[arg(long)]
    patch_side: Option<usize>,
    #[arg(long)]
    branches: Option<usize>,
    #[arg(long, value_parser = ["constant", "random"])]
    init: Option<String>,
    #[arg(long, value_parser = ["learnable", "fixed"])]
    cuts: Option<String>,
    #[arg(long, value_parser = ["true", "false"])]
    include_original: Option<String>,
    /// Window edge softness.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    lr_factor: Option<f64>,
    #[arg(long)]
    lr_patience: Option<usize>,
    /// Stop after this many epochs without a better validation loss.
    #[arg(long)]
    early_stop: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Consensus-label a ratings CSV and write the split manifest.
    Label {
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// Manifest CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalize, resample and cut patches into a patch cache.
    Preprocess {
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// Directory of `<series_id>.mhd` volumes.
        #[arg(long)]
        volumes: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Patch cache to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV index; defaults next to the cache.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        patch_side: Option<usize>,
        /// Add the eight rotations of every training patch.
        #[arg(long, value_parser = ["true", "false"])]
        augment: Option<String>,
    },
    /// Train a model and write its checkpoint and epoch log.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        patches: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Epoch log CSV; defaults next to the checkpoint.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Iteratively pseudo-label the unlabeled pool and retrain.
    Pseudolabel {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        patches: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Minimum confidence max(p, 1 - p) for a pseudo-label.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        max_rounds: Option<usize>,
        /// Stop once a round accepts fewer than this many nodules.
        #[arg(long)]
        min_new: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Report confusion counts, metrics, ROC and learned cuts on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        patches: Option<PathBuf>,
        #[arg(long, value_parser = ["train", "val", "test"])]
        split: Option<String>,
        /// Where metrics.csv and roc.csv go; defaults to the checkpoint's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write a Grad-CAM heatmap for one nodule as a MetaImage volume.
    Gradcam {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        patches: Option<PathBuf>,
        #[arg(long)]
        nodule: Option<String>,
        /// `.mhd` header to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic benign/malignant nodules with ratings, manifest and patches.
    Phantom {
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        benign: Option<usize>,
        #[arg(long)]
        malignant: Option<usize>,
        /// Number of cases given ambiguous ratings.
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        patch_side: Option<usize>,
    },
}

#[derive(Default)]
struct Flags(BTreeMap<String, String>);

impl Flags {
    fn put<V: ToString>(&mut self, key: &str, v: &Option<V>) {
        if let Some(v) = v {
            self.0.insert(key.to_string(), v.to_string());
        }
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) {
        self.put(key, &v.as_ref().map(|p| p.display()));
    }

    fn model(&mut self, m: &ModelArgs) {
        self.put("mode", &m.mode);
        self.put("scale", &m.scale);
        self.put("patch_side", &m.patch_side);
        self.put("branches", &m.branches);
        self.put("init", &m.init);
        self.put("cuts", &m.cuts);
        self.put("include_original", &m.include_original);
        self.put("tau", &m.tau);
    }

    fn train(&mut self, t: &TrainArgs) {
        self.put("epochs", &t.epochs);
        self.put("batch_size", &t.batch_size);
        self.put("lr", &t.lr);
        self.put("min_lr", &t.min_lr);
        self.put("lr_factor", &t.lr_factor);
        self.put("lr_patience", &t.lr_patience);
        self.put("early_stop", &t.early_stop);
    }
}

fn flags(cli: &Cli) -> BTreeMap<String, String> {
    let mut f = Flags::default();
    f.put("seed", &cli.seed);
    match &cli.command {
        Command::Label { ratings, out } => {
            f.path("ratings", ratings);
            f.path("out", out);
        }
        Command::Preprocess {
            ratings,
            volumes,
            manifest,
            out,
            index,
            patch_side,
            augment,
        } => {
            f.path("ratings", ratings);
            f.path("volumes", volumes);
            f.path("manifest", manifest);
            f.path("out", out);
            f.path("index", index);
            f.put("patch_side", patch_side);
            f.put("augment", augment);
        }
        Command::Train {
            manifest,
            patches,
            out,
            log,
            model,
            train,
        } => {
            f.path("manifest", manifest);
            f.path("patches", patches);
            f.path("out", out);
            f.path("log", log);
            f.model(model);
            f.train(train);
        }
        Command::Pseudolabel {
            manifest,
            patches,
            out_dir,
            threshold,
            max_rounds,
            min_new,
            model,
            train,
        } => {
            f.path("manifest", manifest);
            f.path("patches", patches);
            f.path("out_dir", out_dir);
            f.put("threshold", threshold);
            f.put("max_rounds", max_rounds);
            f.put("min_new", min_new);
            f.model(model);
            f.train(train);
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            patches,
            split,
            out_dir,
        } => {
            f.path("checkpoint", checkpoint);
            f.path("manifest", manifest);
            f.path("patches", patches);
            f.put("split", split);
            f.path("out_dir", out_dir);
        }
        Command::Gradcam {
            checkpoint,
            patches,
            nodule,
            out,
        } => {
            f.path("checkpoint", checkpoint);
            f.path("patches", patches);
            f.put("nodule", nodule);
            f.path("out", out);
        }
        Command::Phantom {
            out_dir,
            benign,
            malignant,
            hidden,
            patch_side,
        } => {
            f.path("out_dir", out_dir);
            f.put("benign", benign);
            f.put("malignant", malignant);
            f.put("hidden", hidden);
            f.put("patch_side", patch_side);
        }
    }
    f.0
}

fn run(cli: &Cli) -> CliResult<()> {
    let rc = RunConfig::resolve(cli.config.as_deref(), std::env::var(SEED_ENV).ok(), flags(cli))?;
    match cli.command {
        Command::Label { .. } => commands::label(&rc),
        Command::Preprocess { .. } => commands::preprocess(&rc),
        Command::Train { .. } => commands::train(&rc),
        Command::Pseudolabel { .. } => commands::pseudolabel(&rc),
        Command::Evaluate { .. } => commands::evaluate(&rc),
        Command::Gradcam { .. } => commands::gradcam(&rc),
        Command::Phantom { .. } => commands::phantom(&rc),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
