use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mres_cli::*;
use mres_core::diagnostics::sweep_csv;
use mres_core::model::Preset;

#[derive(Parser)]
#[command(name = "mres", version, about = "Resolution-adjustable multimodal masked autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-autoencoder pretraining on the synthetic corpus.
    Pretrain(PretrainArgs),
    /// Encode one sample into per-modality feature maps at a target GSD.
    Encode(EncodeArgs),
    /// Closed-form operation counts over a target GSD sweep.
    Flops(FlopsArgs),
    /// Finite-difference gradient checks; exits nonzero on failure.
    Gradcheck(GradcheckArgs),
    /// Expert gate weights over a log-spaced interpolation ratio grid.
    ExpertSweep(SweepArgs),
    /// Corpus configuration files.
    #[command(subcommand)]
    Corpus(CorpusCommand),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    steps_per_epoch: usize,
    #[arg(long, default_value_t = 2)]
    warmup_epochs: usize,
    /// Total steps, overriding epochs × steps per epoch.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 1.5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Standardized sample file; without one a corpus sample is generated.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    gsd_target: f64,
    #[arg(long, default_value = "features.mrt")]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// Target GSDs; defaults to each dataset's grid.
    #[arg(long, value_delimiter = ',')]
    gsd_target: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Trained model; without one a fresh model is swept.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SWEEP_RANGE.0)]
    min_ratio: f64,
    #[arg(long, default_value_t = SWEEP_RANGE.1)]
    max_ratio: f64,
    #[arg(long, default_value_t = SWEEP_RANGE.2)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Write the built-in desk corpus with its normalization table.
    Init {
        #[arg(long, default_value_t = DESK_CORPUS_SEED)]
        seed: u64,
        #[arg(long, default_value = "corpus.toml")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Pretrain(a) => {
            let cfg = RunConfig {
                corpus: a.config,
                preset: a.preset,
                epochs: a.epochs,
                steps_per_epoch: a.steps_per_epoch,
                base_lr: a.lr,
                warmup_epochs: a.warmup_epochs,
                seed: a.seed,
                out: a.out,
                checkpoint_every: a.checkpoint_every,
                steps: a.steps,
            };
            let summary = cmd_pretrain(&cfg, |r| {
                if r.step % 50 == 0 {
                    eprintln!("step {:>5}  {:<10} gsd {:>5}  N {:>5}  lr {:.2e}  loss {:.4}", r.step, r.dataset, r.gsd_target, r.n_tokens, r.lr, r.loss);
                }
            })?;
            eprintln!("{} steps in {:.1?}", summary.records.len(), summary.elapsed);
            for p in &summary.checkpoints {
                println!("{}", p.display());
            }
        }
        Command::Encode(a) => {
            let input = match a.input {
                Some(p) => EncodeInput::File(p),
                None => EncodeInput::Generated { corpus: a.config, dataset: a.dataset, seed: a.seed },
            };
            for g in cmd_encode(&a.checkpoint, &input, a.gsd_target, Some(&a.out))? {
                println!("{}: {:?}", g.modality, g.data.shape());
            }
        }
        Command::Flops(a) => emit(&flops_csv(&cmd_flops(a.config.as_deref(), a.preset, &a.gsd_target)?), a.out.as_deref())?,
        Command::Gradcheck(a) => {
            let report = cmd_gradcheck(a.preset, a.seed, a.corrupt.as_deref())?;
            print!("{}", report.render());
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExpertSweep(a) => {
            let rows = cmd_expert_sweep(a.checkpoint.as_deref(), a.preset, a.seed, (a.min_ratio, a.max_ratio, a.points))?;
            emit(&sweep_csv(&rows), a.out.as_deref())?;
        }
        Command::Corpus(CorpusCommand::Init { seed, out }) => {
            cmd_corpus_init(seed, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
