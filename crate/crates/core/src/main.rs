use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use openintent::boundary::BoundaryMode;
use openintent::cli::{self, RunConfig, OUTPUT_DIR_ENV};
use openintent::losses::LossVariant;
use openintent::synthetic::{self, SyntheticConfig};
use openintent::{Error, Result};

#[derive(Parser)]
#[command(name = "openintent", version, about = "Open intent classification with learned decision boundaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the known classes and write split_plan.json
    Prepare {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        proportion: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, env = OUTPUT_DIR_ENV)]
        output: PathBuf,
    },
    /// Stage 1: train the sentence encoder
    TrainEncoder(RunArgs),
    /// Stage 2: learn decision boundaries over frozen embeddings
    TrainBoundary(RunArgs),
    /// Evaluate a trained run directory
    Evaluate(RunArgs),
    /// Full pipeline for every seed plus an aggregate report
    Experiment(RunArgs),
    /// Write a synthetic dataset directory
    GenSynthetic(SyntheticArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output: Option<PathBuf>,
    #[arg(long)]
    proportion: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// ce | cl | kcl | kccl
    #[arg(long)]
    loss: Option<LossVariant>,
    /// adb | adbes
    #[arg(long)]
    mode: Option<BoundaryMode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    e: Option<f64>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    stage1_lr: Option<f64>,
    #[arg(long)]
    stage2_lr: Option<f64>,
    /// Comma-separated seed list
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    precomputed_train: Option<PathBuf>,
    #[arg(long)]
    precomputed_test: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $($target:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$field { c.$($target).+ = v; })*
            };
        }
        set!(
            dataset => dataset_dir,
            output => output_dir,
            proportion => proportion,
            split_seed => split_seed,
            loss => stage1.loss,
            mode => stage2.mode,
            k => stage1.k,
            m => stage1.m,
            lambda => stage1.lambda,
            tau => stage1.tau,
            eta => stage2.eta,
            e => stage2.e,
            s => stage2.s,
            stage1_epochs => stage1.epochs,
            stage2_epochs => stage2.epochs,
            stage1_lr => stage1.learning_rate,
            stage2_lr => stage2.learning_rate,
            seeds => seeds,
        );
        if let Some(p) = self.precomputed_train {
            c.precomputed_train = Some(p);
        }
        if let Some(p) = self.precomputed_test {
            c.precomputed_test = Some(p);
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output: PathBuf,
    /// JSON generator configuration; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    known: Option<usize>,
    #[arg(long)]
    open: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn single_seed(config: &RunConfig) -> RunConfig {
    config.with_seed(config.seeds[0])
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let value = match cli.command {
        Command::Prepare { dataset, proportion, split_seed, output } => {
            serde_json::to_value(cli::cmd_prepare(&dataset, proportion, split_seed, &output)?)?
        }
        Command::TrainEncoder(args) => {
            let c = single_seed(&args.resolve()?);
            let r = cli::cmd_train_encoder(&c, &c.output_dir)?;
            let last = r.trace.last();
            serde_json::json!({
                "checkpoint": c.output_dir.join(cli::ENCODER_FILE),
                "final_loss": last.map(|t| t.loss),
                "intra_class_cos": last.map(|t| t.intra_class_cos),
                "inter_class_cos": last.map(|t| t.inter_class_cos),
            })
        }
        Command::TrainBoundary(args) => {
            let c = single_seed(&args.resolve()?);
            let r = cli::cmd_train_boundary(&c, &c.output_dir)?;
            serde_json::json!({
                "boundary": c.output_dir.join(cli::BOUNDARY_FILE),
                "radii": r.model.radii,
            })
        }
        Command::Evaluate(args) => {
            let c = single_seed(&args.resolve()?);
            serde_json::to_value(cli::cmd_evaluate(&c, &c.output_dir)?.report)?
        }
        Command::Experiment(args) => serde_json::to_value(cli::cmd_experiment(&args.resolve()?)?)?,
        Command::GenSynthetic(args) => {
            let mut c = match &args.config {
                Some(path) => {
                    let s = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                    serde_json::from_str::<SyntheticConfig>(&s)?
                }
                None => SyntheticConfig::default(),
            };
            if let Some(v) = args.known { c.known_classes = v; }
            if let Some(v) = args.open { c.open_classes = v; }
            if let Some(v) = args.per_class { c.per_class = v; }
            if let Some(v) = args.spread { c.spread = v; }
            if let Some(v) = args.seed { c.seed = v; }
            let corpus = synthetic::generate(&c)?;
            corpus.write(&args.output)?;
            serde_json::json!({
                "output": args.output,
                "train": corpus.train.len(),
                "valid": corpus.valid.len(),
                "test": corpus.test.len(),
            })
        }
    };
    Ok(value)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let payload = serde_json::json!({ "error": err.kind(), "message": err.to_string() });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
