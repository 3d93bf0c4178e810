use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segdoctor_core::data::{Dataset, SynthDataset, SynthParams, VocDataset};
use segdoctor_core::diagnosis::emit_report;
use segdoctor_core::model::SegmentationModel;
use segdoctor_core::train::{ablate, evaluate, load_model, train, EvalOptions, RunConfig};
use segdoctor_core::{Error, Result};

#[derive(Parser)]
#[command(name = "segdoctor", version, about = "Treat and diagnose semantic segmentation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune a model with the configured treatments.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Report mIoU, per-class IoU and boundary-F of a checkpoint.
    Evaluate {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 2)]
        band: usize,
    },
    /// Run the baseline / +category / +boundary / +both grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Split errors into boundary and category errors and write overlays.
    Diagnose {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 2)]
        band: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A VOC-layout directory, or `synth` for generated shapes.
    #[arg(long)]
    data: String,
    /// Split list under ImageSets/Segmentation (VOC only).
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 50)]
    synth_count: usize,
    #[arg(long, default_value_t = 64)]
    synth_size: usize,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

impl Source {
    fn dataset(&self, num_classes: usize) -> Result<Box<dyn Dataset>> {
        if self.data == "synth" {
            let params = SynthParams::new(self.synth_count, self.synth_size, num_classes, self.synth_seed);
            return Ok(Box::new(SynthDataset::new(params)?));
        }
        let root = Path::new(&self.data);
        if !root.is_dir() {
            return Err(Error::data(format!("`{}` is neither `synth` nor a directory", self.data)));
        }
        Ok(Box::new(VocDataset::open(root, &self.split, num_classes)?))
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let summary = train(&cfg)?;
            let last = summary.last();
            println!(
                "trained {} epochs: loss {:.4} -> {:.4}, val mIoU {:.4} (best {:.4} at epoch {}), boundary-F {:.4}",
                summary.epochs.len(),
                summary.initial_loss,
                summary.final_loss,
                last.val.miou,
                summary.best_miou,
                summary.best_epoch,
                last.val.boundary_f
            );
            println!("artifacts in {}", summary.output_dir.display());
        }
        Command::Evaluate { source, band } => {
            let model = load_model(&source.checkpoint)?;
            let data = source.dataset(model.num_classes())?;
            let options = EvalOptions {
                batch_size: source.batch_size,
                band,
                keep_pixels: false,
            };
            let params = model.params();
            let report = evaluate(&model, data.as_ref(), &options, params.dtype(), params.device())?;
            print_json(&report.metrics)?;
        }
        Command::Ablate { config } => {
            let cfg = RunConfig::load(&config)?;
            let table = ablate(&cfg)?;
            print!("{}", table.to_markdown());
        }
        Command::Diagnose { source, band, out } => {
            if band == 0 {
                return Err(Error::config("--band must be at least 1"));
            }
            let model = load_model(&source.checkpoint)?;
            let data = source.dataset(model.num_classes())?;
            let options = EvalOptions {
                batch_size: source.batch_size,
                band,
                keep_pixels: true,
            };
            let params = model.params();
            let report = evaluate(&model, data.as_ref(), &options, params.dtype(), params.device())?;
            let images = (0..data.len())
                .map(|i| Ok(data.sample(i)?.to_rgb()))
                .collect::<Result<Vec<_>>>()?;
            let summary = emit_report(&report.decomposition, &images, &out)?;
            let t = summary.totals;
            println!(
                "{} pixels: {} correct, {} boundary errors, {} category errors, {} ignored; boundary-F {:.4} at d={band}",
                summary.total_pixels, t.correct, t.boundary_error, t.category_error, t.ignored, summary.boundary_f
            );
            println!("report in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
