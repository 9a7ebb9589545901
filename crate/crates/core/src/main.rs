use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xpert::experiment::{
    export_boundary, export_masks, export_weight_hist, load_mask_inputs, run_path, Grid, TrainedModel,
};
use xpert::nn::Checkpoint;
use xpert::Error;

/// Multiplicative adversarial training experiments.
#[derive(Parser)]
#[command(name = "xpert", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; XPERT_SEED overrides its seed.
    Run {
        config: PathBuf,
        /// Suppress per-evaluation progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Write input, mask and masked-input PGM images.
    ExportMasks {
        checkpoint: PathBuf,
        /// `table`, `moons[:N[:NOISE[:SEED]]]` or an IDX image file.
        dataset: String,
        #[arg(long, value_delimiter = ',', required = true)]
        indices: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write class-1 probabilities over a 2-D grid as CSV.
    ExportBoundary {
        checkpoint: PathBuf,
        /// `xmin,xmax,ymin,ymax,steps`
        #[arg(long, allow_hyphen_values = true)]
        grid: Grid,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a histogram of one checkpoint tensor as CSV.
    ExportHist {
        checkpoint: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Diverged { .. } | Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn execute(cmd: Command) -> xpert::Result<()> {
    match cmd {
        Command::Run { config, quiet } => {
            let summary = run_path(&config, &mut |row| {
                if !quiet {
                    eprintln!(
                        "iter {:>6}  loss {:.4}  ce {:.4}  xadv {:.4}  test_acc {:.4}",
                        row.iteration, row.loss, row.ce, row.xadv, row.test_acc
                    );
                }
            })?;
            println!(
                "final test accuracy {:.4}; artifacts in {}",
                summary.final_accuracy,
                summary.output_dir.display()
            );
        }
        Command::ExportMasks {
            checkpoint,
            dataset,
            indices,
            out,
        } => {
            let model = TrainedModel::load(&checkpoint)?;
            let inputs = load_mask_inputs(&dataset, &model)?;
            let files = export_masks(&model, &inputs, &indices, &out)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
        Command::ExportBoundary { checkpoint, grid, out } => {
            let model = TrainedModel::load(&checkpoint)?;
            export_boundary(&model.classifier, &grid, &out)?;
            println!("wrote {} grid points to {}", grid.steps * grid.steps, out.display());
        }
        Command::ExportHist {
            checkpoint,
            layer,
            bins,
            out,
        } => {
            let hist = export_weight_hist(&Checkpoint::load(&checkpoint)?, &layer, bins, &out)?;
            println!("wrote {} bins to {}", hist.counts.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
