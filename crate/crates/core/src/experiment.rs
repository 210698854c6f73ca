//! Single runs and multi-seed strategy sweeps, with CSV and manifest output.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{StalenessCombine, StrategyConfig, StrategyKind};
use crate::config::{DatasetSpec, RunConfig, SeedOverrides};
use crate::data::{self, Dataset, PartitionPlan, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model;
use crate::sim::{self, MetricsRow};

pub const CSV_HEADER: &str =
    "round,sim_time,strategy,seed,test_accuracy,test_loss,mean_tau,max_tau,mean_S,mean_raw_weight,flags";

/// Name used in the `strategy` column.
pub fn strategy_label(cfg: &StrategyConfig) -> String {
    match (cfg.kind, cfg.staleness_combine) {
        (StrategyKind::ContributionAware, StalenessCombine::Multiply) => {
            "contribution_aware_multiply".to_string()
        }
        (kind, _) => kind.name().to_string(),
    }
}

pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub plan: PartitionPlan,
}

/// Builds the train/test split and the client partition for a config.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let seeds = cfg.seed_streams();
    let (train, test) = match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            dim,
            per_class,
            test_per_class,
            spread,
        } => {
            let all = data::generate_synthetic(
                SyntheticSpec {
                    classes: *classes,
                    dim: *dim,
                    per_class: per_class + test_per_class,
                    spread: *spread,
                },
                seeds.data,
            )?;
            let (train, test) = all.split_per_class(*test_per_class)?;
            (train, test)
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            data::load_idx(train_images, train_labels)?,
            data::load_idx(test_images, test_labels)?,
        ),
    };
    let plan = data::partition(&train, cfg.clients, cfg.partition, seeds.data)?;
    Ok(PreparedData { train, test, plan })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PartitionSummary {
    pub min_size: usize,
    pub max_size: usize,
    pub equal_sizes: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub config_hash: String,
    pub strategy: String,
    pub seed: u64,
    pub seed_streams: sim::SeedStreams,
    pub rounds_completed: u64,
    pub sim_time: f64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub partition: PartitionSummary,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub strategy: String,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub manifest: RunManifest,
}

impl RunResult {
    pub fn csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CSV_HEADER}").unwrap();
        write_rows(&mut out, self);
        out
    }
}

fn write_rows(out: &mut String, run: &RunResult) {
    for r in &run.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.sim_time,
            run.strategy,
            run.seed,
            r.test_accuracy,
            r.test_loss,
            r.mean_tau,
            r.max_tau,
            r.mean_s,
            r.mean_raw_weight,
            r.flags
        )
        .unwrap();
    }
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_prepared(cfg, &data)
}

fn run_prepared(cfg: &RunConfig, data: &PreparedData) -> Result<RunResult> {
    let settings = cfg.sim_settings();
    let arch = settings.arch.clone();
    let out = sim::run(settings, &data.train, &data.test, &data.plan)?;
    let final_eval = model::evaluate(&out.final_params, &arch, &data.test)?;

    let sizes = data.plan.sizes();
    let partition = PartitionSummary {
        min_size: *sizes.iter().min().unwrap(),
        max_size: *sizes.iter().max().unwrap(),
        equal_sizes: sizes.iter().all(|&s| s == sizes[0]),
    };
    let mut notes = Vec::new();
    if !partition.equal_sizes {
        notes.push(format!(
            "client partitions are unequal ({}..={} samples)",
            partition.min_size, partition.max_size
        ));
    }
    if out.rows.iter().any(|r| !r.flags.is_empty()) {
        notes.push("some rounds carry warning flags; see the flags column".to_string());
    }

    Ok(RunResult {
        strategy: strategy_label(&cfg.strategy),
        seed: cfg.seed,
        manifest: RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.hash(),
            strategy: strategy_label(&cfg.strategy),
            seed: cfg.seed,
            seed_streams: cfg.seed_streams(),
            rounds_completed: out.rounds,
            sim_time: out.sim_time,
            final_accuracy: final_eval.accuracy,
            final_loss: final_eval.mean_loss,
            partition,
            notes,
        },
        rows: out.rows,
    })
}

/// How the accuracy target for rounds-to-target is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetAccuracy {
    Absolute(f64),
    /// Fraction of the best accuracy any run in the sweep reached.
    RelativeToBest(f64),
}

impl Default for TargetAccuracy {
    fn default() -> Self {
        TargetAccuracy::RelativeToBest(0.9)
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub strategies: Vec<StrategyConfig>,
    pub seeds: Vec<u64>,
    pub target: TargetAccuracy,
    /// Re-run contribution-aware under `multiply` if `divide` loses to FedBuff.
    pub dual_check: bool,
}

impl SweepSpec {
    /// Strategy configs that share every parameter of `base` except the kind.
    pub fn from_kinds(base: &RunConfig, kinds: &[StrategyKind], seeds: Vec<u64>) -> Self {
        SweepSpec {
            strategies: kinds
                .iter()
                .map(|&kind| StrategyConfig { kind, ..base.strategy })
                .collect(),
            seeds,
            target: TargetAccuracy::default(),
            dual_check: false,
        }
    }
}

/// First evaluated round whose accuracy reaches `target`.
pub fn rounds_to_target(rows: &[MetricsRow], target: f64) -> Option<u64> {
    rows.iter().find(|r| r.test_accuracy >= target).map(|r| r.round)
}

/// Median where `None` ranks above every value; `None` if the median lands there.
pub fn median_rounds(values: &[Option<u64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| match (a, b) {
        (Some(x), Some(y)) => x.cmp(y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2].map(|v| v as f64)
    } else {
        match (sorted[n / 2 - 1], sorted[n / 2]) {
            (Some(a), Some(b)) => Some((a + b) as f64 / 2.0),
            _ => None,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CurvePoint {
    pub round: u64,
    pub median_accuracy: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StrategySummary {
    pub strategy: String,
    pub runs: usize,
    pub runs_reaching_target: usize,
    pub rounds_to_target: Vec<Option<u64>>,
    pub median_rounds_to_target: Option<f64>,
    pub best_accuracy: f64,
    pub median_final_accuracy: f64,
}

/// Outcome of comparing contribution-aware against FedBuff on median
/// rounds-to-target. `passed` means contribution-aware needed no more rounds.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DirectionalCheck {
    pub fedbuff_median: Option<f64>,
    pub divide_median: Option<f64>,
    pub divide_passed: bool,
    pub multiply_median: Option<f64>,
    pub multiply_passed: Option<bool>,
}

impl DirectionalCheck {
    pub fn passed(&self) -> bool {
        self.divide_passed || self.multiply_passed == Some(true)
    }
}

/// `a ≤ b` with `None` meaning "never reached".
fn no_slower(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x <= y,
        (Some(_), None) | (None, None) => true,
        (None, Some(_)) => false,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepManifest {
    pub tool_version: &'static str,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub strategies: Vec<String>,
    pub target: TargetAccuracy,
    pub target_accuracy: f64,
    pub summaries: Vec<StrategySummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directional_check: Option<DirectionalCheck>,
    pub runs: Vec<RunManifest>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    /// Runs in (strategy, seed) order.
    pub runs: Vec<RunResult>,
    pub curves: Vec<(String, Vec<CurvePoint>)>,
    pub manifest: SweepManifest,
}

impl SweepReport {
    /// Every row of every run under one header.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CSV_HEADER}").unwrap();
        for run in &self.runs {
            write_rows(&mut out, run);
        }
        out
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("strategy,round,median_accuracy,runs\n");
        for (strategy, points) in &self.curves {
            for p in points {
                writeln!(out, "{strategy},{},{},{}", p.round, p.median_accuracy, p.runs).unwrap();
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "never".to_string(), |v| v.to_string());
        let mut out = String::from(
            "strategy,runs,runs_reaching_target,median_rounds_to_target,target_accuracy,best_accuracy,median_final_accuracy\n",
        );
        for s in &self.manifest.summaries {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.strategy,
                s.runs,
                s.runs_reaching_target,
                fmt(s.median_rounds_to_target),
                self.manifest.target_accuracy,
                s.best_accuracy,
                s.median_final_accuracy
            )
            .unwrap();
        }
        out
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serialises") + "\n"
    }

    pub fn summary(&self, strategy: &str) -> Option<&StrategySummary> {
        self.manifest.summaries.iter().find(|s| s.strategy == strategy)
    }

    /// Writes `metrics.csv`, `curves.csv`, `summary.csv` and `manifest.json`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let io = |path: &Path, e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, body) in [
            ("metrics.csv", self.metrics_csv()),
            ("curves.csv", self.curves_csv()),
            ("summary.csv", self.summary_csv()),
            ("manifest.json", self.manifest_json()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

/// Config for one sweep cell: the base config with this strategy and replicate seed.
pub fn sweep_cell(base: &RunConfig, strategy: StrategyConfig, seed: u64) -> RunConfig {
    RunConfig {
        strategy,
        seed,
        seeds: SeedOverrides::default(),
        ..base.clone()
    }
}

/// A failed sweep cell, named so the caller can report it.
#[derive(Debug, thiserror::Error)]
#[error("run strategy={strategy} seed={seed} failed: {source}")]
pub struct RunFailure {
    pub strategy: String,
    pub seed: u64,
    #[source]
    pub source: Error,
}

/// Runs every (strategy, seed) cell, in parallel across cells.
///
/// All strategies under one seed share data, partition, initial model and
/// speed draws. `on_complete` is called as each run finishes, from worker
/// threads; the returned report is always in (strategy, seed) order.
pub fn run_sweep<F>(base: &RunConfig, spec: &SweepSpec, on_complete: F) -> std::result::Result<SweepReport, RunFailure>
where
    F: Fn(&RunResult) + Sync,
{
    let fail = |strategy: String, seed: u64, source: Error| RunFailure {
        strategy,
        seed,
        source,
    };
    if spec.strategies.is_empty() || spec.seeds.is_empty() {
        return Err(fail(
            String::new(),
            0,
            Error::invalid("a sweep needs at least one strategy and one seed"),
        ));
    }
    base.validate()
        .map_err(|e| fail(strategy_label(&base.strategy), base.seed, e))?;

    // Data depends only on the seed, so it is built once per seed and shared.
    let prepared: Vec<PreparedData> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let cfg = sweep_cell(base, base.strategy, seed);
            prepare_data(&cfg).map_err(|e| fail("data".into(), seed, e))
        })
        .collect::<std::result::Result<_, _>>()?;

    let execute = |strategies: &[StrategyConfig]| -> std::result::Result<Vec<RunResult>, RunFailure> {
        let cells: Vec<(StrategyConfig, usize)> = strategies
            .iter()
            .flat_map(|&s| (0..spec.seeds.len()).map(move |i| (s, i)))
            .collect();
        cells
            .par_iter()
            .map(|&(strategy, i)| {
                let seed = spec.seeds[i];
                let cfg = sweep_cell(base, strategy, seed);
                let result = cfg
                    .validate()
                    .and_then(|_| run_prepared(&cfg, &prepared[i]))
                    .map_err(|e| fail(strategy_label(&strategy), seed, e))?;
                on_complete(&result);
                Ok(result)
            })
            .collect()
    };

    let mut runs = execute(&spec.strategies)?;
    let mut labels: Vec<String> = spec.strategies.iter().map(strategy_label).collect();

    let best = runs
        .iter()
        .flat_map(|r| r.rows.iter().map(|row| row.test_accuracy))
        .fold(0.0, f64::max);
    let target_accuracy = match spec.target {
        TargetAccuracy::Absolute(t) => t,
        TargetAccuracy::RelativeToBest(f) => f * best,
    };

    let mut directional_check = None;
    let divide = spec.strategies.iter().find(|s| {
        s.kind == StrategyKind::ContributionAware && s.staleness_combine == StalenessCombine::Divide
    });
    let has_fedbuff = spec.strategies.iter().any(|s| s.kind == StrategyKind::Fedbuff);
    if let (Some(divide), true) = (divide, has_fedbuff) {
        let med = |runs: &[RunResult], label: &str| {
            let rtt: Vec<Option<u64>> = runs
                .iter()
                .filter(|r| r.strategy == label)
                .map(|r| rounds_to_target(&r.rows, target_accuracy))
                .collect();
            median_rounds(&rtt)
        };
        let fedbuff_median = med(&runs, StrategyKind::Fedbuff.name());
        let divide_median = med(&runs, &strategy_label(divide));
        let divide_passed = no_slower(divide_median, fedbuff_median);
        let mut check = DirectionalCheck {
            fedbuff_median,
            divide_median,
            divide_passed,
            multiply_median: None,
            multiply_passed: None,
        };
        if !divide_passed && spec.dual_check {
            let multiply = StrategyConfig {
                staleness_combine: StalenessCombine::Multiply,
                ..*divide
            };
            let label = strategy_label(&multiply);
            if !labels.contains(&label) {
                runs.extend(execute(&[multiply])?);
                labels.push(label.clone());
            }
            let m = med(&runs, &label);
            check.multiply_median = m;
            check.multiply_passed = Some(no_slower(m, fedbuff_median));
        }
        directional_check = Some(check);
    }

    let mut curves = Vec::new();
    let mut summaries = Vec::new();
    for label in &labels {
        let group: Vec<&RunResult> = runs.iter().filter(|r| &r.strategy == label).collect();
        let shortest = group.iter().map(|r| r.rows.len()).min().unwrap_or(0);
        let points = (0..shortest)
            .map(|i| {
                let mut accs: Vec<f64> = group.iter().map(|r| r.rows[i].test_accuracy).collect();
                CurvePoint {
                    round: group[0].rows[i].round,
                    median_accuracy: median(&mut accs),
                    runs: accs.len(),
                }
            })
            .collect();
        curves.push((label.clone(), points));

        let rtt: Vec<Option<u64>> = group
            .iter()
            .map(|r| rounds_to_target(&r.rows, target_accuracy))
            .collect();
        let mut finals: Vec<f64> = group.iter().map(|r| r.manifest.final_accuracy).collect();
        summaries.push(StrategySummary {
            strategy: label.clone(),
            runs: group.len(),
            runs_reaching_target: rtt.iter().flatten().count(),
            median_rounds_to_target: median_rounds(&rtt),
            rounds_to_target: rtt,
            best_accuracy: group
                .iter()
                .flat_map(|r| r.rows.iter().map(|row| row.test_accuracy))
                .fold(0.0, f64::max),
            median_final_accuracy: median(&mut finals),
        });
    }

    let manifest = SweepManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        config_hash: base.hash(),
        seeds: spec.seeds.clone(),
        strategies: labels,
        target: spec.target,
        target_accuracy,
        summaries,
        directional_check,
        runs: runs.iter().map(|r| r.manifest.clone()).collect(),
    };
    Ok(SweepReport {
        runs,
        curves,
        manifest,
    })
}
