use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use anybit::checkpoint::Checkpoint;
use anybit::data::{Dataset, DatasetSpec};
use anybit::network::{write_bundle, ExecPlan};
use anybit::report::build_report;
use anybit::trainer::{calibrate_bn, evaluate, RunConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "anybit",
    version,
    about = "Train and run one network at many bit-widths"
)]
struct Cli {
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Forces deterministic mode (sequential evaluation).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print test accuracy of a checkpoint at the given bit-widths.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        bits: Vec<u8>,
        /// Dataset spec (TOML file); defaults to the run's test set.
        #[arg(long)]
        data: Option<String>,
    },
    /// Recalibrate batch-norm statistics for bit-widths (possibly untrained ones).
    Calibrate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        bits: Vec<u8>,
        /// `train`, `test`, or a TOML file holding a dataset spec.
        #[arg(long)]
        data: String,
        /// Where to write the updated checkpoint; defaults to overwriting `--ckpt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a deployment bundle of packed codes and banks.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy table, relative metric and teacher histogram as CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Summary JSON of a reference run; repeat for one run per bit-width.
        #[arg(long)]
        reference: Vec<PathBuf>,
    },
}

fn load_dataset(arg: &str, config: &RunConfig) -> Result<Dataset> {
    let spec = match arg {
        "train" => config.data.train.clone(),
        "test" => config.data.test.clone(),
        path => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading dataset spec {path}"))?;
            toml::from_str::<DatasetSpec>(&text)
                .with_context(|| format!("parsing dataset spec {path}"))?
        }
    };
    Ok(spec.load()?)
}

fn print_accuracies(acc: &BTreeMap<u8, f64>) {
    println!("b,accuracy");
    for (b, a) in acc {
        println!("{b},{a:.2}");
    }
}

fn train(cli: &Cli, config: &Path, resume: Option<&Path>) -> Result<()> {
    let mut cfg =
        RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    let summary = trainer.run()?;
    print_accuracies(&summary.bits.iter().map(|(b, r)| (*b, r.accuracy)).collect());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config, resume } => train(cli, config, resume.as_deref()),
        Command::Eval { ckpt, bits, data } => {
            let ck = Checkpoint::load(ckpt)?;
            let ds = load_dataset(data.as_deref().unwrap_or("test"), &ck.config)?;
            let mut acc = BTreeMap::new();
            for &b in bits {
                acc.insert(
                    b,
                    evaluate(&ck.net, &ExecPlan::student(b), &ds, ck.config.batch_size)?,
                );
            }
            print_accuracies(&acc);
            Ok(())
        }
        Command::Calibrate {
            ckpt,
            bits,
            data,
            out,
        } => {
            let mut ck = Checkpoint::load(ckpt)?;
            let ds = load_dataset(data, &ck.config)?;
            let test = ck.config.data.test.load()?;
            let mut acc = BTreeMap::new();
            for &b in bits {
                if b < 2 || b > ck.net.bits().b1() {
                    bail!(
                        "cannot calibrate {b} bits: must lie in [2, {}]",
                        ck.net.bits().b1()
                    );
                }
                calibrate_bn(&mut ck.net, b, &ds, ck.config.batch_size)?;
                acc.insert(
                    b,
                    evaluate(&ck.net, &ExecPlan::student(b), &test, ck.config.batch_size)?,
                );
            }
            ck.save(out.as_deref().unwrap_or(ckpt))?;
            print_accuracies(&acc);
            Ok(())
        }
        Command::Export { ckpt, out } => {
            let ck = Checkpoint::load(ckpt)?;
            write_bundle(&ck.net, out)?;
            Ok(())
        }
        Command::Report { metrics, reference } => {
            print!("{}", build_report(metrics, reference)?.render()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
