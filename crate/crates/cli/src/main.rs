//! `lcbnn`: train, evaluate and check loss-calibrated dropout networks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lcbnn::data::{gen_diabetes, Dataset, SynthConfig};
use lcbnn::decision::builtin_utility;
use lcbnn::experiment::{
    self, ExperimentConfig, MetricsReport, PredictionMode, RunOptions, SweepAxis,
};
use lcbnn::oracle::kl_check;
use lcbnn::trainer::{load_checkpoint, UtilitySpec};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "lcbnn",
    version,
    about = "Loss-calibrated dropout networks: experiments and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured model for every seed.
    Run(RunArgs),
    /// Run the full grid over one axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values (defaults depend on the axis).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Gradient and exact-oracle self-checks.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Per-example class gains and optimal predictions as CSV.
    Gainmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV (as written by `gen-data`).
        #[arg(long)]
        data: PathBuf,
        /// Built-in utility name or path to a utility grid file.
        #[arg(long)]
        utility: String,
        #[arg(long, default_value_t = 0.0)]
        shift: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic diagnosis train and test sets as CSV.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// JSON generator settings; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the KL identity and bound on random enumerable models.
    KlCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a built-in experiment config as JSON.
    Preset { name: String },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: diabetes, mnist or mnist-clean.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds, e.g. `0,1,2` or `0-9` (overrides the config).
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    HiddenSize,
    Noise,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
    Check(String),
}

impl From<lcbnn::Error> for Failure {
    fn from(e: lcbnn::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn parse_seeds(text: &str) -> CliResult<Vec<u64>> {
    let bad = || {
        Failure::Validation(anyhow::anyhow!(
            "invalid --seeds {text:?}: expected e.g. 0,1,2 or 0-9"
        ))
    };
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) =
                    (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(seeds)
}

fn load_config(args: &RunArgs) -> CliResult<ExperimentConfig> {
    let cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => experiment::preset(name)?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    match &args.seeds {
        Some(s) => Ok(cfg.with_seeds(parse_seeds(s)?)?),
        None => Ok(cfg),
    }
}

fn options(args: &RunArgs) -> RunOptions {
    RunOptions {
        out_dir: args.out.clone(),
        threads: args.threads,
    }
}

fn print_summary(report: &MetricsReport) {
    let primary = match report.mode {
        PredictionMode::Optimal => "optimal",
        PredictionMode::Standard => "standard",
    };
    println!("{} ({}), primary mode: {primary}", report.name, report.data);
    println!(
        "{:>10} {:>9} {:>6} {:>22} {:>22}",
        "axis", "model", "seeds", "EU standard (±std)", "EU optimal (±std)"
    );
    for c in &report.cells {
        println!(
            "{:>10} {:>9} {:>6} {:>13.4} ±{:.4} {:>13.4} ±{:.4}",
            c.axis_value
                .map(|v| v.to_string())
                .unwrap_or_else(|| "-".into()),
            c.model.name(),
            c.seeds,
            c.standard_expected_utility.mean,
            c.standard_expected_utility.std,
            c.optimal_expected_utility.mean,
            c.optimal_expected_utility.std,
        );
    }
}

fn resolve_utility(text: &str, shift: f64) -> CliResult<lcbnn::decision::UtilityMatrix> {
    let spec = if builtin_utility(text).is_ok() || !Path::new(text).exists() {
        UtilitySpec::Builtin(text.to_string())
    } else {
        UtilitySpec::File { file: text.into() }
    };
    Ok(spec.resolve(shift)?)
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let report = experiment::run(&cfg, &options(&args))?;
            print_summary(&report);
        }
        Command::Sweep { run, axis, values } => {
            let cfg = load_config(&run)?;
            let axis = match axis {
                Axis::HiddenSize => SweepAxis::HiddenSize,
                Axis::Noise => SweepAxis::Noise,
            };
            let report = experiment::sweep(&cfg, axis, values, &options(&run))?;
            print_summary(&report);
        }
        Command::Selfcheck { seed, json } => {
            let report = experiment::selfcheck(seed)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&report)
                        .map_err(|e| Failure::Runtime(e.into()))?
                );
            } else {
                for g in &report.gradients {
                    println!(
                        "{} gradient {:<8} max rel error {:.2e} over {} parameters",
                        if g.passed() { "PASS" } else { "FAIL" },
                        g.loss,
                        g.max_rel_error,
                        g.params_checked
                    );
                }
                println!(
                    "{} kl identity: residual {:.2e}, jensen excess {:.2e}, tight gap {:.2e}",
                    if report.kl_passed { "PASS" } else { "FAIL" },
                    report.kl.max_identity_residual,
                    report.kl.max_jensen_excess,
                    report.kl.max_tight_gap
                );
            }
            if !report.passed {
                return Err(Failure::Check("self-check failed".into()));
            }
        }
        Command::Gainmap {
            checkpoint,
            data,
            utility,
            shift,
            out,
            samples,
            seed,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let utility = resolve_utility(&utility, shift)?;
            let dataset = Dataset::read_csv(&data, utility.classes())?;
            experiment::gainmap(&params, &dataset, &utility, samples, seed, &out)?;
            println!("wrote {} rows to {}", dataset.len(), out.display());
        }
        Command::GenData { out, config, seed } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))
                        .map_err(Failure::Validation)?;
                    serde_json::from_str::<SynthConfig>(&text)
                        .with_context(|| format!("parsing {}", path.display()))
                        .map_err(Failure::Validation)?
                }
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let split = gen_diabetes(&cfg)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))
                .map_err(Failure::Runtime)?;
            split.train.write_csv(&out.join("train.csv"))?;
            split.test.write_csv(&out.join("test.csv"))?;
            println!(
                "wrote {} training and {} test patients to {}",
                split.train.len(),
                split.test.len(),
                out.display()
            );
        }
        Command::KlCheck { instances, seed } => {
            let report = kl_check(instances, seed)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.into()))?
            );
            let tol = experiment::KL_TOLERANCE;
            if !(report.max_identity_residual < tol
                && report.max_jensen_excess <= tol
                && report.max_tight_gap < tol)
            {
                return Err(Failure::Check("KL identity check failed".into()));
            }
        }
        Command::Preset { name } => {
            println!("{}", experiment::preset(&name)?.to_json()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists_and_ranges() {
        assert_eq!(parse_seeds("0,2-4, 9").ok(), Some(vec![0, 2, 3, 4, 9]));
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("5-2").is_err());
    }
}
