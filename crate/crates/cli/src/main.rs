use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsmooth::harness::{self, CHECKPOINT_FILE};
use lsmooth::robustness::AttackKind;
use lsmooth::TrainConfig;

/// Train, attack and inspect label-smoothness regularized networks.
#[derive(Debug, Parser)]
#[command(name = "lsmooth", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat JSON run configuration; omitted fields keep their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Number of training examples to use.
    #[arg(long, value_name = "N")]
    subset: Option<usize>,
    /// Number of test examples to use.
    #[arg(long, value_name = "N")]
    test_subset: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> lsmooth::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.subset {
            cfg.train_subset = Some(n);
        }
        if let Some(n) = self.test_subset {
            cfg.test_subset = Some(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(CHECKPOINT_FILE))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write the checkpoint, metrics.json and smoothness.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Print the effective configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a checkpoint under deformations and write report.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/model.lsm`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// e.g. clean, gaussian:15, fgsm-eps-after-norm:0.1, fgsm-snr-before-norm:20,
        /// dropout:0.25, quantize:5, minimal-l2-fgsm-search:20. Repeatable.
        #[arg(long = "attack", value_name = "SPEC", default_value = "clean")]
        attacks: Vec<AttackKind>,
        /// Comma-separated attack seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Export per-layer Laplacians of one test batch and smoothness against depth.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Index of the test batch to export.
        #[arg(long, default_value_t = 0)]
        batch: usize,
        /// Laplacian power; defaults to the configured one.
        #[arg(long)]
        power: Option<u32>,
    },
    /// Print the effective configuration as JSON.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> lsmooth::Result<()> {
    match cli.command {
        Command::Train { common, print_config } => {
            let cfg = common.config()?;
            if print_config {
                println!("{}", cfg.to_json()?);
                return Ok(());
            }
            let run = harness::cmd_train(&cfg, &common.out)?;
            println!(
                "trained {} epochs; test accuracy {:.4}; outputs in {}",
                cfg.epochs,
                run.metrics.final_test_accuracy(),
                common.out.display()
            );
        }
        Command::Eval { common, checkpoint, attacks, seeds } => {
            let cfg = common.config()?;
            let report = harness::cmd_eval(&cfg, &common.checkpoint(&checkpoint), &attacks, &seeds, &common.out)?;
            for r in report.records() {
                println!("{}\t{}\t{}\t{}\t{:.6}", r.attack, r.param, r.seed, r.metric, r.value);
            }
        }
        Command::Inspect { common, checkpoint, batch, power } => {
            let cfg = common.config()?;
            let power = power.unwrap_or(cfg.power_m);
            let out = harness::cmd_inspect(&cfg, &common.checkpoint(&checkpoint), batch, power, &common.out)?;
            for path in out.laplacians.iter().chain(&out.powers).chain([&out.smoothness]) {
                println!("{}", path.display());
            }
        }
        Command::PrintConfig { common } => println!("{}", common.config()?.to_json()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
