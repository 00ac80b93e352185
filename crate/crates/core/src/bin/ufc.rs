use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use ufc::pipeline::{report, run_matrix, run_stage, Config, Stage};

#[derive(Parser)]
#[command(
    name = "ufc",
    version,
    about = "Cluster-guided contrastive pretraining for segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train and test sets.
    Generate(Common),
    /// Train the VAE and export its posterior means.
    TrainVae(Common),
    /// Turn VAE features into pseudo-labels.
    Cluster(Common),
    /// Contrastive pretraining of the encoder.
    Pretrain(Common),
    /// Fine-tune a UNet per annotation fraction.
    Finetune(Common),
    /// Score fine-tuned UNets on the test set.
    Evaluate(Common),
    /// Run methods × fractions × seeds and the clustering ablation.
    Matrix(Common),
    /// Summarize a matrix run.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set clustering.k=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, replacing `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> ufc::Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.apply_seed_env()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let (stage, common) = match &cli.command {
        Command::Generate(c) => (Some(Stage::Generate), c),
        Command::TrainVae(c) => (Some(Stage::TrainVae), c),
        Command::Cluster(c) => (Some(Stage::Cluster), c),
        Command::Pretrain(c) => (Some(Stage::Pretrain), c),
        Command::Finetune(c) => (Some(Stage::Finetune), c),
        Command::Evaluate(c) => (Some(Stage::Evaluate), c),
        Command::Matrix(c) | Command::Report(c) => (None, c),
    };
    let cfg = match common.load() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let outcome = match (&cli.command, stage) {
        (_, Some(stage)) => run_stage(stage, &cfg),
        (Command::Matrix(_), None) => run_matrix(&cfg).map(|_| ()),
        _ => report(&cfg.output_dir).map(|text| print!("{text}")),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
