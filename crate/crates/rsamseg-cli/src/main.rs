use clap::{Parser, Subcommand};

use rsamseg_cli::commands::{
    cmd_ablate, cmd_eval, cmd_fewshot, cmd_predict, cmd_prepare, cmd_train, AblateArgs, EvalArgs,
    FewshotArgs, PredictArgs, PrepareArgs, TrainArgs,
};
use rsamseg_cli::error::Result;

/// Binary segmentation of remote-sensing imagery with a frequency-prompted,
/// adapter-tuned ViT — dataset preparation through training, evaluation,
/// ablation, few-shot sweeps, and mask export.
#[derive(Parser)]
#[command(name = "rsamseg", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build train/test patch manifests from a raster directory or generate
    /// a synthetic labeled set.
    Prepare(PrepareArgs),
    /// Train a model and keep the best-metric checkpoint with loss and
    /// evaluation curves.
    Train(TrainArgs),
    /// Score a checkpoint — or a directory of externally produced masks —
    /// against a labeled manifest.
    Eval(EvalArgs),
    /// Train the full model and one variant per disabled feature, and
    /// tabulate parameter counts, losses, and metrics.
    Ablate(AblateArgs),
    /// Train on nested fractions of the training set and tabulate how
    /// metrics scale with data.
    Fewshot(FewshotArgs),
    /// Write predicted masks (and optional comparison panels) for a
    /// manifest.
    Predict(PredictArgs),
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare(args) => {
            let s = cmd_prepare(args)?;
            println!(
                "prepared {} scenes: {} train patches -> {}, {} test patches{}",
                s.scenes,
                s.train_patches,
                s.train_manifest.display(),
                s.test_patches,
                s.test_manifest
                    .as_deref()
                    .map(|p| format!(" -> {}", p.display()))
                    .unwrap_or_default()
            );
        }
        Command::Train(args) => {
            let s = cmd_train(args)?;
            println!(
                "trained {} steps in {:.1}s; final loss {:.6}; best {} -> {}",
                s.report.steps,
                s.report.wall_clock_seconds,
                s.final_loss,
                s.report
                    .best_metric
                    .map(|m| format!("jaccard {m:.4}"))
                    .unwrap_or_else(|| "final parameters".to_string()),
                s.report.best_checkpoint.display()
            );
        }
        Command::Eval(args) => {
            let s = cmd_eval(args)?;
            println!(
                "scored {} patches; micro jaccard {:.4}, f1 {:.4}, miou {:.4} -> {}",
                s.images, s.micro.jaccard, s.micro.f1, s.micro.miou, s.csv_path.display()
            );
        }
        Command::Ablate(args) => {
            let s = cmd_ablate(args)?;
            for row in &s.rows {
                println!(
                    "{:<18} params {:>9} (trainable {:>8}) loss {:.6} jaccard {:.4}",
                    row.variant,
                    row.params_total,
                    row.params_trainable,
                    row.final_loss,
                    row.micro.jaccard
                );
            }
            println!("-> {}", s.csv_path.display());
        }
        Command::Fewshot(args) => {
            let s = cmd_fewshot(args)?;
            for row in &s.rows {
                println!(
                    "fraction {:<5} ({:>4} patches) loss {:.6} jaccard {:.4}",
                    row.fraction, row.subset_size, row.final_loss, row.micro.jaccard
                );
            }
            println!("-> {}", s.csv_path.display());
        }
        Command::Predict(args) => {
            let s = cmd_predict(args)?;
            println!(
                "wrote {} masks -> {}{}",
                s.masks,
                s.masks_dir.display(),
                s.overlays_dir
                    .as_deref()
                    .map(|p| format!(", overlays -> {}", p.display()))
                    .unwrap_or_default()
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
