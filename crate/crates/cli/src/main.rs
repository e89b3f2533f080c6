//! `flexdepth` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flexdepth::assignment::Strategy;
use flexdepth::depth_space::divisor_depths;
use flexdepth::evaluation::{delta_report, EvalGrid};
use flexdepth::metrics::{Divisor, MetricsTable, PlanMetrics};
use flexdepth::model::{load_checkpoint, save_checkpoint};
use flexdepth::pipeline::{self, PipelineConfig};
use flexdepth::training::{pretrain, DistillCorpus};

const EXIT_USAGE: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "flexdepth",
    version,
    about = "Train and evaluate flexible-depth encoder-decoder models"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run seed; overrides the seeds in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (TOML). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DivisorArg {
    Sample,
    Population,
}

impl From<DivisorArg> for Divisor {
    fn from(d: DivisorArg) -> Self {
        match d {
            DivisorArg::Sample => Divisor::Sample,
            DivisorArg::Population => Divisor::Population,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assign sub-networks for every divisor depth of D and print TB/ALD.
    Plan {
        #[arg(long)]
        depth: usize,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long, value_enum, default_value = "sample")]
        divisor: DivisorArg,
    },
    /// Table of TB and ALD for all strategies at a composite depth D.
    Metrics {
        #[arg(long, default_value_t = 12)]
        depth: usize,
        #[arg(long, value_enum, default_value = "sample")]
        divisor: DivisorArg,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Train the full-depth teacher.
    Pretrain,
    /// Decode the training sources with a teacher to build a fine-tuning corpus.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Fine-tune a checkpoint with the configured strategy (or LayerDrop).
    Finetune {
        #[arg(long)]
        init: PathBuf,
        /// Corpus TSV from `distill`; the raw references are used otherwise.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Score a checkpoint at every task of the depth grid.
    EvalGrid {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the evaluation strategy from the config.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
    },
    /// Cellwise comparison of two grid CSVs (candidate minus baseline).
    Report {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
    },
    /// Pretrain, distill, fine-tune and evaluate in one run.
    Pipeline,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
        format!("unknown strategy '{s}'; expected one of: {}", names.join(", "))
    })
}

/// A problem with the user's input rather than with the run itself.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn is_validation(e: &flexdepth::Error) -> bool {
    use flexdepth::Error as E;
    match e {
        E::Stage { stage, source } => *stage == "validate" || is_validation(source),
        E::ZeroDepth
        | E::NotADivisor { .. }
        | E::DepthOutOfRange { .. }
        | E::EmptyNetwork { .. }
        | E::NotComposite(_)
        | E::InvalidModelConfig(_)
        | E::InvalidTrainConfig(_)
        | E::InvalidProbability(_)
        | E::InvalidTaskSample { .. }
        | E::UnknownStrategy(_)
        | E::PlanMismatch(_)
        | E::Toml(_) => true,
        _ => false,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return EXIT_VALIDATION;
    }
    match err.downcast_ref::<flexdepth::Error>() {
        Some(e) if is_validation(e) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Invalid(format!("input file {} does not exist", path.display())).into())
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let config = match &common.config {
        Some(path) => {
            require_file(path)?;
            PipelineConfig::load(path)?
        }
        None => PipelineConfig::default(),
    };
    let config = match common.seed {
        Some(seed) => config.with_seed(seed),
        None => config,
    };
    config.validate()?;
    Ok(config)
}

fn out_dir(common: &Common, config: &PipelineConfig) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(&config.name));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Plan {
            depth,
            strategy,
            divisor,
        } => {
            let plan = strategy.assign(&divisor_depths(depth)?)?;
            let m = PlanMetrics::of(&plan, divisor.into())?;
            match &common.out {
                Some(path) => write(path, plan.to_text())?,
                None => print!("{}", plan.to_text()),
            }
            println!("TB {:.4}  ALD {:.4}", m.tb, m.ald);
        }
        Command::Metrics { depth, divisor, format } => {
            let table = MetricsTable::compute(depth, divisor.into())?;
            match format {
                Format::Text => print!("{}", table.to_text()),
                Format::Csv => print!("{}", table.to_csv()),
            }
            if let Some(path) = &common.out {
                write(path, table.to_csv())?;
            }
        }
        Command::Pretrain => {
            let config = load_config(common)?;
            let dir = out_dir(common, &config)?;
            let data = config.dataset()?;
            let outcome = pretrain(&config.model, &config.pretrain, &data.train)?;
            save_checkpoint(&outcome.params, dir.join("teacher.ckpt"))?;
            outcome.save_log(dir.join("pretrain_log.csv"))?;
            println!(
                "teacher written to {} (final loss {:.4})",
                dir.join("teacher.ckpt").display(),
                outcome.final_loss(20).unwrap_or(f64::NAN)
            );
        }
        Command::Distill { teacher } => {
            require_file(&teacher)?;
            let config = load_config(common)?;
            let dir = out_dir(common, &config)?;
            let params = load_checkpoint(&teacher)?;
            let data = config.dataset()?;
            let corpus = pipeline::finetune_corpus(
                &PipelineConfig {
                    distill: true,
                    ..config
                },
                &params,
                &data,
            )?;
            write(&dir.join("corpus.tsv"), corpus.to_tsv())?;
            println!(
                "{} pairs written to {} ({} excluded)",
                corpus.len(),
                dir.join("corpus.tsv").display(),
                corpus.excluded
            );
        }
        Command::Finetune { init, corpus } => {
            require_file(&init)?;
            let config = load_config(common)?;
            let dir = out_dir(common, &config)?;
            let params = load_checkpoint(&init)?;
            let corpus = match corpus {
                Some(path) => {
                    require_file(&path)?;
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    DistillCorpus::from_tsv(&text)?
                }
                None => DistillCorpus::from_references(config.dataset()?.train),
            };
            let outcome = pipeline::finetune_arm(&config, &params, &corpus)?;
            save_checkpoint(&outcome.params, dir.join("model.ckpt"))?;
            outcome.save_log(dir.join("finetune_log.csv"))?;
            println!(
                "model written to {} ({} forward passes)",
                dir.join("model.ckpt").display(),
                outcome.total_passes()
            );
        }
        Command::EvalGrid { checkpoint, strategy } => {
            require_file(&checkpoint)?;
            let mut config = load_config(common)?;
            if strategy.is_some() {
                config.eval.strategy = strategy;
            }
            let dir = out_dir(common, &config)?;
            let params = load_checkpoint(&checkpoint)?;
            if params.config() != &config.model {
                return Err(Invalid(format!(
                    "checkpoint {} was trained with a different model config",
                    checkpoint.display()
                ))
                .into());
            }
            let data = config.dataset()?;
            let label = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let grid = pipeline::evaluate(&config, &params, &data, label)?;
            write(&dir.join("grid.csv"), grid.to_csv())?;
            write(&dir.join("grid.txt"), grid.heatmap())?;
            print!("{}", grid.heatmap());
        }
        Command::Report { baseline, candidate } => {
            let read = |p: &Path| -> Result<EvalGrid> {
                require_file(p)?;
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(EvalGrid::from_csv(&text)?)
            };
            let report = delta_report(&read(&baseline)?, &read(&candidate)?)?;
            if let Some(path) = &common.out {
                write(path, report.to_text())?;
            }
            print!("{}", report.to_text());
        }
        Command::Pipeline => {
            let config = load_config(common)?;
            let dir = out_dir(common, &config)?;
            let report = pipeline::run_pipeline(&config, Some(&dir))
                .with_context(|| format!("artifacts so far are in {}", dir.display()))?;
            print!("{}", report.summary(&config));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
