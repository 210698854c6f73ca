//! `fedsim`: run single federated-learning simulations or strategy sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedsim_core::experiment::{self, SweepSpec, TargetAccuracy};
use fedsim_core::{RunConfig, StrategyKind};

const OUT_DIR_ENV: &str = "FEDSIM_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "fedsim", version, about = "Buffered asynchronous federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Override `max_rounds` from the config file.
    #[arg(long)]
    max_rounds: Option<u64>,

    /// Suppress progress output on stderr.
    #[arg(long, short)]
    quiet: bool,

    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "fedsim-out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and write `<strategy>_seed<seed>.csv` plus a manifest.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run every strategy under every seed and write comparison tables.
    Sweep {
        config: PathBuf,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', default_value = "fedbuff,contribution_aware")]
        strategies: Vec<String>,
        /// Seed list: `1..5` (inclusive) or `1,2,7`.
        #[arg(long, default_value = "1..5")]
        seeds: String,
        /// Absolute target accuracy for rounds-to-target.
        #[arg(long, conflicts_with = "target_fraction")]
        target: Option<f64>,
        /// Target as a fraction of the best accuracy reached by any run.
        #[arg(long, default_value_t = 0.9)]
        target_fraction: f64,
        /// If contribution-aware (divide) needs more rounds than FedBuff, also run the multiply variant.
        #[arg(long)]
        dual_check: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let spec = spec.trim();
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: u64 = lo.trim().parse().with_context(|| format!("bad seed range `{spec}`"))?;
        let hi = hi.trim().trim_start_matches('=');
        let hi: u64 = hi.parse().with_context(|| format!("bad seed range `{spec}`"))?;
        if hi < lo {
            bail!("empty seed range `{spec}`");
        }
        return Ok((lo..=hi).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad seed `{s}`")))
        .collect()
}

fn load_config(path: &Path, max_rounds: Option<u64>) -> Result<RunConfig> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::parse_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    if let Some(r) = max_rounds {
        cfg.max_rounds = r;
    }
    Ok(cfg)
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn run(config: &Path, common: &Common) -> Result<()> {
    let cfg = load_config(config, common.max_rounds)?;
    let result = experiment::run_experiment(&cfg)
        .with_context(|| format!("run strategy={} seed={}", cfg.strategy.kind, cfg.seed))?;
    std::fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    let stem = format!("{}_seed{}", result.strategy, result.seed);
    write(&common.out.join(format!("{stem}.csv")), &result.csv())?;
    let manifest = serde_json_pretty(&result.manifest)?;
    write(&common.out.join(format!("{stem}.manifest.json")), &manifest)?;
    if !common.quiet {
        eprintln!(
            "{stem}: {} rounds, final accuracy {:.4}, wrote {}",
            result.manifest.rounds_completed,
            result.manifest.final_accuracy,
            common.out.display()
        );
    }
    Ok(())
}

fn serde_json_pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    config: &Path,
    strategies: &[String],
    seeds: &str,
    target: Option<f64>,
    target_fraction: f64,
    dual_check: bool,
    common: &Common,
) -> Result<()> {
    let cfg = load_config(config, common.max_rounds)?;
    let kinds = strategies
        .iter()
        .map(|s| s.trim().parse::<StrategyKind>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut spec = SweepSpec::from_kinds(&cfg, &kinds, parse_seeds(seeds)?);
    spec.target = match target {
        Some(t) => TargetAccuracy::Absolute(t),
        None => TargetAccuracy::RelativeToBest(target_fraction),
    };
    spec.dual_check = dual_check;

    let runs_dir = common.out.join("runs");
    std::fs::create_dir_all(&runs_dir)
        .with_context(|| format!("creating {}", runs_dir.display()))?;
    let quiet = common.quiet;
    let report = experiment::run_sweep(&cfg, &spec, |run| {
        let path = runs_dir.join(format!("{}_seed{}.csv", run.strategy, run.seed));
        if let Err(e) = std::fs::write(&path, run.csv()) {
            eprintln!("warning: could not write {}: {e}", path.display());
        }
        if !quiet {
            eprintln!(
                "done {} seed {}: final accuracy {:.4}",
                run.strategy, run.seed, run.manifest.final_accuracy
            );
        }
    })?;
    report.write_to(&common.out)?;
    if !quiet {
        print!("{}", report.summary_csv());
        if let Some(check) = &report.manifest.directional_check {
            println!(
                "contribution_aware vs fedbuff: divide {} , multiply {}",
                if check.divide_passed { "no slower" } else { "slower" },
                match check.multiply_passed {
                    Some(true) => "no slower",
                    Some(false) => "slower",
                    None => "not run",
                }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, common } => run(config, common),
        Command::Sweep {
            config,
            strategies,
            seeds,
            target,
            target_fraction,
            dual_check,
            common,
        } => sweep(config, strategies, seeds, *target, *target_fraction, *dual_check, common),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
