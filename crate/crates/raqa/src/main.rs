//! Command-line entry point: synthesize data, pretrain the retriever, train
//! jointly, evaluate, and sweep retrieval depths.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use raqa::joint::TrainingVariant;
use raqa::pipeline::{run_eval, run_pretrain, run_sweep, run_synth, run_train, RunConfig};

#[derive(Parser)]
#[command(name = "raqa", about = "Retrieval-augmented QA at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for this stage's artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and question files.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive retriever pretraining; emits encoder checkpoint and index.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory holding corpus.jsonl and questions.jsonl.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Joint training of retriever and answer scorer.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory with the pretrained encoder and index (not needed for
        /// the no-retrieval variant).
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<TrainingVariant>,
        #[arg(long)]
        k_train: Option<usize>,
    },
    /// Decode the test split and write predictions plus the metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory with the trained model artifacts.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        k_test: Option<usize>,
    },
    /// Train/evaluate over the configured K_train x K_test grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<TrainingVariant>,
    },
}

fn load_config(common: &Common) -> raqa::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run() -> raqa::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            run_synth(&cfg, &common.out)
        }
        Command::Pretrain { common, data } => {
            let cfg = load_config(&common)?;
            let data = data.unwrap_or_else(|| common.out.clone());
            run_pretrain(&cfg, &data, &common.out)
        }
        Command::Train {
            common,
            data,
            pretrained,
            variant,
            k_train,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.joint.variant = v;
            }
            if let Some(k) = k_train {
                cfg.joint.k_train = k;
            }
            let data = data.unwrap_or_else(|| common.out.clone());
            let pretrained = pretrained.unwrap_or_else(|| common.out.clone());
            run_train(&cfg, &data, &pretrained, &common.out)
        }
        Command::Eval {
            common,
            data,
            model,
            k_test,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = k_test {
                cfg.k_test = k;
            }
            let data = data.unwrap_or_else(|| common.out.clone());
            let model = model.unwrap_or_else(|| common.out.clone());
            let report = run_eval(&cfg, &data, &model, &common.out)?;
            print!("{}", report.render_table());
            Ok(())
        }
        Command::Sweep {
            common,
            data,
            pretrained,
            variant,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.joint.variant = v;
            }
            let data = data.unwrap_or_else(|| common.out.clone());
            let pretrained = pretrained.unwrap_or_else(|| common.out.clone());
            run_sweep(&cfg, &data, &pretrained, &common.out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
