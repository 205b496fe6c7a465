use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use tailreg_core::dataset::{
    generate, partition_by_frequency, DatasetConfig, FreqGroup, SyntheticDataset,
};
use tailreg_core::digest::file_digest;
use tailreg_core::experiments::{
    cell_dir, eval_cell, load_experiment, run_experiment, train_cell, verify_tree, CellConfig,
    ExperimentSpec, SweepResult, SPEC_VERSION,
};
use tailreg_core::heads::HeadVariant;
use tailreg_core::plots::emit_plots;
use tailreg_core::training::TrainMode;

#[derive(Parser)]
#[command(
    name = "tailreg",
    version,
    about = "Regression-bias experiments on synthetic long-tailed detection data"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen {
        #[arg(long, default_value = "lt60")]
        preset: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one head variant; artifacts go to <out>/<variant>/<seed>/.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// specific | agnostic | cab:A | cluster:K:num|scale | merge:r,c
        #[arg(long)]
        head: HeadVariant,
        #[command(flatten)]
        common: CommonArgs,
        /// Training seed (defaults to train.seed from the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Train the classifier jointly instead of using ground-truth classes.
        #[arg(long)]
        joint: bool,
    },
    /// Evaluate a trained cell directory on the val split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Cell directory written by `train`.
        #[arg(long)]
        cell: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use predicted classes instead of ground-truth labels.
        #[arg(long)]
        no_oracle: bool,
    },
    /// Run every (variant, seed) cell of an experiment.
    Sweep {
        /// Experiment preset: table1, table3a, table3b, table3c.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Semicolon-separated variant list.
        #[arg(long, value_delimiter = ';')]
        variants: Option<Vec<HeadVariant>>,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Render plots for a finished sweep.
    Plot {
        /// Sweep output directory.
        #[arg(long)]
        run: PathBuf,
        /// Defaults to <run>/plots.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every manifest below a directory against the files it lists.
    Verify { dir: PathBuf },
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `train.learning_rate`.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Overrides `train.batch_size`.
    #[arg(long)]
    batch_size: Option<usize>,
}

impl CommonArgs {
    fn spec(&self, base: ExperimentSpec) -> anyhow::Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => {
                ExperimentSpec::load(path).with_context(|| format!("reading {}", path.display()))?
            }
            None => base,
        };
        if let Some(out) = &self.out {
            spec.out = out.clone();
        }
        if let Some(e) = self.epochs {
            spec.train.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            spec.train.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            spec.train.batch_size = b;
        }
        Ok(spec)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_dataset(path: &Path) -> anyhow::Result<(SyntheticDataset, String)> {
    let ds = SyntheticDataset::load(path)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    Ok((ds, file_digest(path)?))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Gen { preset, seed, out } => {
            let ds = generate(&DatasetConfig::preset(&preset, seed)?)?;
            let digest = ds.save(&out)?;
            let sizes = partition_by_frequency(&ds, Default::default()).sizes();
            let size = |g| sizes.get(&g).copied().unwrap_or(0);
            println!(
                "{}\t{digest}\ttrain={} val={} rare={} common={} frequent={}",
                out.display(),
                ds.train.len(),
                ds.val.len(),
                size(FreqGroup::Rare),
                size(FreqGroup::Common),
                size(FreqGroup::Frequent)
            );
        }
        Command::Train {
            dataset,
            head,
            common,
            seed,
            joint,
        } => {
            let spec = common.spec(ExperimentSpec::default())?;
            let (ds, digest) = load_dataset(&dataset)?;
            let mut train = spec.train.clone();
            if joint {
                train.mode = TrainMode::Joint;
            }
            let seed = seed.unwrap_or(train.seed);
            train.seed = seed;
            let mut eval = spec.eval.clone();
            eval.oracle_gt_class = train.mode == TrainMode::RegressionOnlyGt;
            let cfg = CellConfig {
                version: SPEC_VERSION,
                variant: head.clone(),
                seed,
                dataset_digest: digest,
                train,
                eval,
                dataset: ds.config.clone(),
            };
            let dir = cell_dir(&spec.out, &head, seed);
            let (_, _, ledger, _) = train_cell(&ds, &cfg, &dir)?;
            println!(
                "{}\tweights={}\tfinal_train_loss={}",
                dir.display(),
                ledger.weights_digest,
                ledger.epoch_train_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval {
            dataset,
            cell,
            config,
            no_oracle,
        } => {
            let (ds, _) = load_dataset(&dataset)?;
            let cell_cfg_path = cell.join("config.toml");
            let stored: CellConfig = toml::from_str(
                &std::fs::read_to_string(&cell_cfg_path)
                    .with_context(|| format!("reading {}", cell_cfg_path.display()))?,
            )
            .with_context(|| format!("parsing {}", cell_cfg_path.display()))?;
            let mut eval = match config {
                Some(path) => ExperimentSpec::load(&path)?.eval,
                None => stored.eval,
            };
            if no_oracle {
                eval.oracle_gt_class = false;
            }
            let report = eval_cell(&ds, &cell, &eval)?;
            print!("{}", report.to_csv());
        }
        Command::Sweep {
            preset,
            common,
            seeds,
            variants,
            jobs,
        } => {
            let base = match &preset {
                Some(name) => ExperimentSpec::preset(name)?,
                None if common.config.is_none() => bail!("sweep needs --preset or --config"),
                None => ExperimentSpec::default(),
            };
            let mut spec = common.spec(base)?;
            if let Some(s) = seeds {
                spec.seeds = s;
            }
            if let Some(v) = variants {
                spec.variants = v;
            }
            let result: SweepResult = match jobs {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()?
                    .install(|| run_experiment(&spec))?,
                None => run_experiment(&spec)?,
            };
            let reused = result.cells.iter().filter(|c| c.reused).count();
            eprintln!(
                "{} cells ({} reused) -> {}  digest {}",
                result.cells.len(),
                reused,
                spec.out.display(),
                result.digest()
            );
            print!("{}", result.table_csv());
        }
        Command::Plot { run, out } => {
            let result = load_experiment(&run)?;
            let dir = out.unwrap_or_else(|| run.join("plots"));
            for path in emit_plots(&result, &dir)? {
                println!("{}", path.display());
            }
        }
        Command::Verify { dir } => {
            let audit = verify_tree(&dir)?;
            for f in &audit.failures {
                eprintln!("FAIL {f}");
            }
            println!(
                "{} manifests, {} files checked, {} failures",
                audit.manifests,
                audit.files,
                audit.failures.len()
            );
            if !audit.ok() {
                bail!("digest audit failed");
            }
        }
    }
    Ok(())
}
