use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ego_anticipation::autodiff::FaultInjection;
use ego_anticipation::harness::{self, gradcheck::run_gradcheck, Checkpoint, RunConfig};
use ego_anticipation::kv::KvFile;
use ego_anticipation::world::{gen_dataset, load_dataset, Dataset, Split, WorldConfig};

#[derive(Parser)]
#[command(
    name = "ego-anticipate",
    version,
    about = "Egocentric action anticipation by imagining future features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// World configuration (`key = value`); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model on one modality and save the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Overrides the modality in the configuration.
        #[arg(long)]
        modality: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Epoch log CSV; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate one checkpoint or the late fusion of several.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ckpt: Vec<PathBuf>,
        /// One weight per checkpoint; equal weights when omitted.
        #[arg(long, value_delimiter = ',')]
        fuse_weights: Option<Vec<f64>>,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every variant of the ablation grid and tabulate validation scores.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Corrupt the tanh backward rule; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_tanh_backward: bool,
    },
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            RunConfig::read(p).with_context(|| format!("reading run config {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    load_dataset(dir, cfg.timeline.window)
        .with_context(|| format!("loading dataset {}", dir.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = match &config {
                Some(p) => WorldConfig::from_kv(&KvFile::read(p)?)?,
                None => WorldConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let manifest = gen_dataset(&cfg, &out)?;
            println!(
                "wrote {} segments for {} actions to {}",
                manifest.segments.len(),
                manifest.vocab.num_actions(),
                out.display()
            );
        }
        Command::Train {
            data,
            modality,
            config,
            out,
            log,
        } => {
            let mut cfg = run_config(config.as_deref())?;
            if let Some(m) = modality {
                cfg.modality = m;
            }
            let ds = dataset(&data, &cfg)?;
            let start = Instant::now();
            let outcome = harness::train(&cfg, &ds)?;
            outcome.best.save(&out)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.csv");
                PathBuf::from(p)
            });
            outcome.write_log(&log_path)?;
            println!(
                "best epoch {} of {}: val top5@1s {:.4} ({:.1}s); checkpoint {}, log {}",
                outcome.best.epoch,
                outcome.log.len(),
                outcome.best.val_top5_1s,
                start.elapsed().as_secs_f64(),
                out.display(),
                log_path.display()
            );
        }
        Command::Eval {
            data,
            ckpt,
            fuse_weights,
            split,
            out,
        } => {
            let ckpts = ckpt
                .iter()
                .map(|p| {
                    Checkpoint::load(p)
                        .with_context(|| format!("loading checkpoint {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let weights = fuse_weights.unwrap_or_else(|| vec![1.0; ckpts.len()]);
            if weights.len() != ckpts.len() {
                bail!(
                    "{} fusion weights for {} checkpoints",
                    weights.len(),
                    ckpts.len()
                );
            }
            let ds = dataset(&data, &ckpts[0].config)?;
            let report = harness::evaluate_checkpoints(&ds, &ckpts, &weights, split)?;
            report.write(&out)?;
            print!("{}", report.to_csv());
        }
        Command::Ablate { data, config, out } => {
            let cfg = run_config(config.as_deref())?;
            let ds = dataset(&data, &cfg)?;
            let table = harness::ablate(&cfg, &ds)?;
            table.write(&out)?;
            print!("{}", table.to_csv());
        }
        Command::Gradcheck {
            corrupt_tanh_backward,
        } => {
            let start = Instant::now();
            let report = run_gradcheck(FaultInjection {
                tanh_backward: corrupt_tanh_backward,
            })?;
            print!("{}", report.render());
            println!(
                "{} suites, {:.1}s: {}",
                report.suites.len(),
                start.elapsed().as_secs_f64(),
                if report.passed() {
                    "all passed"
                } else {
                    "FAILED"
                }
            );
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
