use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gqs::config::RunConfig;
use gqs::metrics::MetricsReport;
use gqs::pipeline::{self, Environment, RunDir, RunLock};
use gqs::{GqsError, Result};

/// Generative query suggestion with click-calibrated preference optimization.
#[derive(Parser)]
#[command(name = "gqs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run directory.
    #[arg(long, default_value = "runs/default")]
    run: PathBuf,
    /// Configuration file; defaults to the run directory's config.txt if present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set dpo.lambda=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// task1 (3 suggestions) or task2 (8 suggestions).
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct RoundArgs {
    #[command(flatten)]
    common: Common,
    /// Round to act on.
    #[arg(long)]
    round: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the world and the logged click dataset.
    Simulate(Common),
    /// Supervised fine-tuning of the round-0 policy on logged lists.
    Sft(Common),
    /// Train the CTR model on the logged clicks.
    TrainCtr(Common),
    /// Recalibrate the CTR model if due and build round t's preference pairs.
    BuildPairs(RoundArgs),
    /// Train round t's policy on its preference pairs.
    Dpo(RoundArgs),
    /// Evaluate round t and mark it complete.
    Eval(RoundArgs),
    /// Run the whole pipeline, resuming after the last completed round.
    Iterate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Aggregate per-round metrics into a CSV and SVG plots.
    Report {
        #[command(flatten)]
        common: Common,
        /// Last round to include; defaults to the last completed one.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Run the pipeline once per value of one setting.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Run values concurrently. Ignored when GQS_DETERMINISTIC=1.
        #[arg(long)]
        parallel: bool,
    },
}

fn resolve(common: &Common, rounds: Option<usize>) -> Result<RunConfig> {
    let from_run = common.run.join("config.txt");
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None if from_run.is_file() => RunConfig::load(&from_run)?,
        None => RunConfig::default(),
    };
    let mut overrides: Vec<String> = common.task.iter().map(|t| format!("task={t}")).collect();
    overrides.extend(common.seed.map(|s| format!("seed={s}")));
    overrides.extend(rounds.map(|r| format!("rounds={r}")));
    overrides.extend(common.overrides.iter().cloned());
    config.apply_overrides(overrides.iter().map(String::as_str))?;
    config.validate()?;
    Ok(config)
}

/// Resolved config, locked and initialised run directory.
fn open(common: &Common) -> Result<(RunConfig, RunDir, RunLock)> {
    let config = resolve(common, None)?;
    let run = RunDir::new(&common.run);
    let lock = RunLock::acquire(run.root())?;
    run.init(&config)?;
    Ok((config, run, lock))
}

fn print_rows(rows: &[MetricsReport]) {
    println!("{}", MetricsReport::CSV_HEADER);
    for r in rows {
        println!("{}", r.csv_row());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let (config, run, _lock) = open(&c)?;
            let env = Environment::new(&config)?;
            let records = pipeline::simulate(&config, &env, &run)?;
            let clicks = records.iter().filter(|r| r.label == 1).count();
            println!(
                "{} records, {clicks} clicks, {} COO keys -> {}",
                records.len(),
                env.dict.len(),
                run.d_ctr_path().display()
            );
        }
        Command::Sft(c) => {
            let (config, run, _lock) = open(&c)?;
            let env = Environment::new(&config)?;
            pipeline::sft(&config, &env, &run)?;
            println!("policy -> {}", run.policy_path(0).display());
        }
        Command::TrainCtr(c) => {
            let (config, run, _lock) = open(&c)?;
            let ckpt = pipeline::train_ctr_stage(&config, &run)?;
            println!("{:?}", ckpt.report);
        }
        Command::BuildPairs(r) => {
            let (config, run, _lock) = open(&r.common)?;
            let env = Environment::new(&config)?;
            let stats = pipeline::build_pairs_stage(&config, &env, &run, r.round)?;
            println!("{stats:?}");
        }
        Command::Dpo(r) => {
            let (config, run, _lock) = open(&r.common)?;
            let curve = pipeline::dpo_stage(&config, &run, r.round)?;
            if let Some(p) = curve.last() {
                println!(
                    "final combined loss {:.6}, mean margin {:.6}",
                    p.combined, p.mean_margin
                );
            }
        }
        Command::Eval(r) => {
            let (config, run, _lock) = open(&r.common)?;
            let env = Environment::new(&config)?;
            print_rows(&[pipeline::eval_round(&config, &env, &run, r.round)?]);
        }
        Command::Iterate { common, rounds } => {
            let config = resolve(&common, rounds)?;
            print_rows(&pipeline::run_pipeline(&config, &RunDir::new(&common.run))?);
        }
        Command::Report { common, rounds } => {
            let run = RunDir::new(&common.run);
            let last = match rounds {
                Some(r) => r,
                None => run
                    .completed_rounds()
                    .checked_sub(1)
                    .ok_or_else(|| GqsError::InvalidArgument("no completed rounds".into()))?,
            };
            let _lock = RunLock::acquire(run.root())?;
            print_rows(&pipeline::report(&run, last)?);
        }
        Command::Sweep {
            common,
            param,
            values,
            rounds,
            parallel,
        } => {
            let config = resolve(&common, rounds)?;
            let rows = pipeline::sweep(&config, &common.run, &param, &values, parallel)?;
            println!("{param},{}", MetricsReport::CSV_HEADER);
            for r in rows {
                println!("{},{}", r.value, r.last.csv_row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gqs: {e}");
            match e {
                GqsError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
