use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use dvam::corpus::{Corpus, Split};
use dvam::harness::{
    evaluate, generate, train_dvam, train_gvam, train_prior, ArtifactKind, Checkpoint, MetricsRecord, TrainConfig,
    TrainOptions,
};
use dvam::model::LatentKind;
use dvam::{DvamError, Exec, Result};

#[derive(Parser)]
#[command(name = "dvam", version, about = "Train, evaluate and sample quantized-attention text autoencoders")]
struct Cli {
    /// Run work items on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Dvam,
    Gvam,
}

#[derive(Subcommand)]
enum Command {
    /// Train a DVAM (stage 1) or GVAM model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with train.txt, val.txt and optionally test.txt.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Write per-epoch validation metrics as CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Skip the diagnostic KL column during stage 1.
        #[arg(long)]
        no_kl_log: bool,
    },
    /// Fit the autoregressive code prior to a trained DVAM checkpoint.
    TrainPrior {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print one CSV metrics line for a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Also print the CSV header.
        #[arg(long)]
        header: bool,
    },
    /// Sample sentences, one per line.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-code usage and geometry as CSV.
    InspectCodebook {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Train {
            config,
            corpus,
            out,
            seed,
            model,
            metrics,
            no_kl_log,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = model {
                cfg.kind = match m {
                    ModelArg::Dvam => LatentKind::Discrete,
                    ModelArg::Gvam => LatentKind::Gaussian,
                };
            }
            cfg.validate()?;
            let corpus = Corpus::load_dir(&corpus)?;
            let opts = TrainOptions {
                exec,
                log_kl: !no_kl_log,
            };
            let outcome = match cfg.kind {
                LatentKind::Discrete => train_dvam(&cfg, &corpus, &opts)?,
                LatentKind::Gaussian => train_gvam(&cfg, &corpus, &opts)?,
            };
            outcome.checkpoint.save(&out)?;
            if let Some(p) = metrics {
                let mut csv = format!("{},beta,lr,train_rec\n", MetricsRecord::CSV_HEADER);
                for e in &outcome.history {
                    csv += &format!("{},{},{},{}\n", e.val.to_csv(), e.beta, e.lr, e.train_rec);
                }
                fs::write(p, csv)?;
            }
            info!("best epoch {}, saved {}", outcome.best_epoch, out.display());
        }
        Command::TrainPrior { checkpoint, corpus, out } => {
            let stage1 = Checkpoint::load(&checkpoint)?;
            let corpus = Corpus::load_dir(&corpus)?;
            let opts = TrainOptions { exec, log_kl: false };
            let outcome = train_prior(&stage1, &corpus, &opts)?;
            outcome.checkpoint.save(&out)?;
            println!("val_prior_nll_per_position,{:.6}", outcome.val_nll_per_token);
        }
        Command::Eval {
            checkpoint,
            prior,
            corpus,
            split,
            header,
        } => {
            let split: Split = split.parse()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let prior = prior.map(|p| Checkpoint::load(&p)).transpose()?;
            let corpus = Corpus::load_dir(&corpus)?;
            let m = evaluate(&ck, prior.as_ref(), corpus.split(split), exec)?;
            if header {
                println!("{}", MetricsRecord::CSV_HEADER);
            }
            println!("{}", m.to_csv());
        }
        Command::Generate {
            checkpoint,
            prior,
            n,
            temperature,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let prior = Checkpoint::load(&prior)?;
            for s in generate(&ck, &prior, n, temperature, seed, exec)? {
                println!("{}", s.text);
            }
        }
        Command::InspectCodebook { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            match (&ck.kind, &ck.codebook) {
                (ArtifactKind::Dvam, Some(book)) => print!("{}", book.inspection_csv()),
                _ => {
                    return Err(DvamError::Config(format!(
                        "{} checkpoint has no codebook",
                        ck.kind.name()
                    )))
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
