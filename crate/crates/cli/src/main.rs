use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use promalign_core::harness::{self, toy, RunConfig, Stage, StageOutcome};

#[derive(Parser)]
#[command(
    name = "promalign",
    version,
    about = "Multimodal alignment pre-training and fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the pseudo-label cache for a pre-training corpus.
    GenPseudoLabels(StageArgs),
    /// Pre-train the encoders with the alignment objectives.
    Pretrain(StageArgs),
    /// Fine-tune the CRF entity tagger.
    FinetuneNer(StageArgs),
    /// Fine-tune the relation classifier.
    FinetuneRe(StageArgs),
    /// Score a fine-tuned checkpoint on a split.
    Eval(StageArgs),
    /// Write the synthetic toy corpora and configs.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed, including encoder initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Compute pseudo-labels once instead of every epoch.
    #[arg(long)]
    freeze_pseudo_labels: bool,
    /// Overrides `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl StageArgs {
    fn load(&self, stage: Stage) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        cfg.stage = stage;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if self.freeze_pseudo_labels {
            cfg.pseudo_labels.freeze = true;
        }
        if let Some(out) = &self.out {
            cfg.paths.out_dir = Some(out.clone());
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (args, stage) = match &cli.command {
        Command::GenPseudoLabels(a) => (a, Stage::GenPseudoLabels),
        Command::Pretrain(a) => (a, Stage::Pretrain),
        Command::FinetuneNer(a) => (a, Stage::FinetuneNer),
        Command::FinetuneRe(a) => (a, Stage::FinetuneRe),
        Command::Eval(a) => (a, Stage::Eval),
        Command::ToyData { out, seed } => {
            let opts = toy::ToyOptions {
                seed: *seed,
                ..Default::default()
            };
            let corpus = toy::generate(out, &opts)?;
            println!("toy corpus written to {}", corpus.root.display());
            return Ok(());
        }
    };
    let cfg = args.load(stage)?;
    match harness::run_stage(&cfg)? {
        StageOutcome::PseudoLabels { path, entries } => {
            println!("{entries} pseudo-labels written to {}", path.display());
        }
        StageOutcome::Pretrain(r) => {
            if let (Some(first), Some(last)) = (r.log.first(), r.log.last()) {
                println!(
                    "{} steps, loss {:.4} -> {:.4}, matching accuracy {:.4}",
                    last.step, first.total, last.total, r.final_itm_accuracy
                );
            }
            println!("checkpoint: {}", r.checkpoint.display());
        }
        StageOutcome::Finetune(r) => {
            if let Some(best) = r.best_dev {
                println!("best dev score {best:.4}");
            }
            println!("checkpoint: {}", r.final_checkpoint.display());
        }
        StageOutcome::Eval(r) => print!("{}", r.summary_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
