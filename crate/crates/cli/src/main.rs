use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use capsroute_core::data::{self, generate_synthetic, Split, SyntheticSpec, MANIFEST_FILE};
use capsroute_core::train::{self, evaluate, init_thread_pool, load_data, open_manifest, run_ablation, train_from_manifest};
use capsroute_core::TrainConfig;

#[derive(Parser)]
#[command(name = "capsroute", version, about = "Capsule + LSTM facial expression sequence classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, run record and the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Training config: split settings and the architecture to enforce.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for confusion.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all four loss configurations and write ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic moving-bar dataset with its manifest.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long = "per-class")]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalise a directory of frames and keep the middle window.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the mirrored and rotated variants.
        #[arg(long)]
        augment: bool,
        #[arg(long, default_value_t = 48)]
        frame_size: usize,
        #[arg(long, default_value_t = 16)]
        length: usize,
    },
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let outcome = train_from_manifest(&cfg, &data, Some(&out))?;
            let r = &outcome.record;
            let last = r.last().context("no epochs were run")?;
            println!(
                "trained {} epochs: loss {:.5}, train acc {:.4}, best acc {:.4} (epoch {})",
                r.epochs.len(),
                last.loss.total,
                last.train_acc,
                r.best_test_acc.unwrap_or(0.0),
                r.best_epoch.unwrap_or(0)
            );
            println!("{}", outcome.final_eval.confusion.to_table());
            println!("outputs in {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            config,
            out,
        } => {
            let split: Split = split.parse()?;
            let (cfg, arch) = match config {
                Some(p) => {
                    let cfg = load_config(&p)?;
                    let arch = cfg.model.clone();
                    (cfg, Some(arch))
                }
                None => (TrainConfig::default(), None),
            };
            let ev = evaluate(&checkpoint, &data, split, &cfg, arch.as_ref())?;
            println!("accuracy {:.4} ({} / {})", ev.accuracy, ev.confusion.correct(), ev.confusion.total());
            println!("{}", ev.confusion.to_table());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join(train::trainer::CONFUSION_FILE), ev.confusion.to_csv())?;
            }
        }
        Command::Ablate { config, data, out } => {
            let mut cfg = load_config(&config)?;
            let manifest = open_manifest(&cfg, &data)?;
            cfg.resolve_classes(&manifest)?;
            let dataset = load_data(&cfg, &manifest)?;
            let report = run_ablation(&cfg, &dataset, Some(&out))?;
            print!("{}", report.to_csv());
            if report.rows.iter().any(|r| r.status != "ok") {
                bail!("some ablation runs failed; see {}", out.join(train::ablation::ABLATION_FILE).display());
            }
        }
        Command::Synth {
            classes,
            per_class,
            seed,
            out,
        } => {
            let m = generate_synthetic(&SyntheticSpec::new(classes, per_class, seed), &out)?;
            println!(
                "wrote {} sequences in {} classes; manifest {}",
                m.entries.len(),
                m.num_classes(),
                out.join(MANIFEST_FILE).display()
            );
        }
        Command::Preprocess {
            input,
            out,
            augment,
            frame_size,
            length,
        } => {
            let dirs = data::preprocess(&input, &out, length, frame_size, augment)?;
            println!("wrote {} sequence(s) of {length} frames under {}", dirs.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_thread_pool();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
