use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use discrim::config::{self, RunConfig};
use discrim::data::Split;
use discrim::train::{self, Model, TrainError};

#[derive(Parser)]
#[command(
    name = "discrim",
    version,
    about = "Train and inspect networks with discriminant and center losses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Named preset the config must agree with.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: runs/<preset>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report loss and accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// IDX directory; defaults to the checkpoint's own dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Write output-neuron inputs with target flags as CSV.
    ExportHistogram {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        neuron: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write 2-D hidden features and per-class means as CSV.
    ExportScatter {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// List preset names.
    Presets,
    /// Describe every config key.
    Keys,
}

fn run(cli: Cli) -> Result<(), TrainError> {
    match cli.command {
        Command::Train {
            config,
            preset,
            seed,
            out,
        } => {
            let mut cfg = RunConfig::load(&config, preset.as_deref())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.out_dir = Some(out);
            }
            let dir = cfg
                .out_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(cfg.run_name()));
            cfg.out_dir = Some(dir.clone());
            let summary = train::train(&cfg, &dir)?;
            let last = summary.last();
            let best = summary.best();
            println!("run directory: {}", dir.display());
            println!(
                "final epoch {}: test loss {} test acc {}",
                last.epoch, last.test.loss, last.test.accuracy
            );
            println!("best epoch {}: test acc {}", best.epoch, best.test.accuracy);
        }
        Command::Eval { ckpt, data, split } => {
            let model = Model::load(&ckpt)?;
            let ds = train::dataset_for(&model, data.as_deref(), split)?;
            let m = train::evaluate(&model.network, &ds)?;
            println!("split: {}", split.name());
            println!("samples: {}", ds.len());
            println!("loss: {}", m.loss);
            println!("accuracy: {}", m.accuracy);
            println!("discriminant_ratio: {}", m.discriminant_ratio);
        }
        Command::ExportHistogram {
            ckpt,
            data,
            split,
            neuron,
            out,
        } => {
            let model = Model::load(&ckpt)?;
            let ds = train::dataset_for(&model, data.as_deref(), split)?;
            let rows = train::export_histogram(&model, &ds, neuron, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Command::ExportScatter { ckpt, data, split, out } => {
            let model = Model::load(&ckpt)?;
            let ds = train::dataset_for(&model, data.as_deref(), split)?;
            let means = train::export_scatter(&model, &ds, &out)?;
            println!("wrote {} and {}", out.display(), means.display());
        }
        Command::Presets => {
            for name in config::preset_names() {
                println!("{name}");
            }
        }
        Command::Keys => {
            for key in config::KEYS {
                println!("{key:<24} {}", config::key_help()[key]);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
