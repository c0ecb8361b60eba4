//! Experiment dispatch and report output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context as _};
use fvdual::harness::{self, CheckRecord, Context, ErgodicSetup, Verdict};
use fvdual::tableau::PartitionChain;
use fvdual::geometry::TypeSet;
use serde::Serialize;

use crate::config::{moment, Config, Experiment, Task};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

/// Command-line overrides applied on top of a parsed config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub outdir: Option<PathBuf>,
    /// Keeps experiments whose id contains the pattern or whose kind equals it.
    pub filter: Option<String>,
}

impl Overrides {
    pub fn apply(&self, config: &mut Config) -> anyhow::Result<()> {
        if let Some(seed) = self.seed {
            config.run.master_seed = seed;
        }
        if let Some(workers) = self.workers {
            config.run.workers = workers;
        }
        if let Some(dir) = &self.outdir {
            config.output.dir = dir.clone();
        }
        if let Some(pattern) = &self.filter {
            config.experiments.retain(|e| e.id.contains(pattern.as_str()) || e.task.kind() == pattern);
            if config.experiments.is_empty() {
                bail!("filter {pattern:?} matches no experiment");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub id: String,
    pub kind: &'static str,
    pub records: Vec<CheckRecord>,
    pub elapsed: Duration,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.passed()).count()
    }
}

pub fn all_passed(outcomes: &[ExperimentOutcome]) -> bool {
    outcomes.iter().all(|o| o.failures() == 0)
}

/// Runs every experiment in order. Parallelism lives inside the harness.
pub fn run(config: &Config) -> anyhow::Result<Vec<ExperimentOutcome>> {
    let base = Context::new(config.run.master_seed, config.run.workers, config.run.threshold)?;
    config
        .experiments
        .iter()
        .map(|exp| {
            let mut ctx = base.clone();
            ctx.master_seed = exp.seed.unwrap_or(config.run.master_seed);
            let start = Instant::now();
            let records = run_experiment(&ctx, exp).with_context(|| format!("experiment {:?}", exp.id))?;
            Ok(ExperimentOutcome { id: exp.id.clone(), kind: exp.task.kind(), records, elapsed: start.elapsed() })
        })
        .collect()
}

fn relabel(records: &mut [CheckRecord], id: &str, prefix: &str) {
    for r in records {
        r.experiment = id.to_string();
        if !prefix.is_empty() {
            r.check = format!("{prefix} {}", r.check);
        }
    }
}

pub fn run_experiment(ctx: &Context, exp: &Experiment) -> fvdual::Result<Vec<CheckRecord>> {
    let model = exp.build_model()?;
    let id = exp.id.as_str();
    let mut out = Vec::new();
    match &exp.task {
        Task::Duality { times, pop_sizes, forward_replicas, replicas, initial, moment: m, duals } => {
            let m = moment(m);
            for &t in times {
                for &n in pop_sizes {
                    let key = format!("{id}/t={t}");
                    let mut records = harness::duality_experiment(
                        ctx, &key, &model, n, initial, &m, t, *forward_replicas, *replicas, duals,
                    )?;
                    relabel(&mut records, id, &format!("t={t} n={n}"));
                    out.extend(records);
                }
            }
        }
        Task::CrossDual { times, replicas, initial, moment: m, duals } => {
            let m = moment(m);
            for &t in times {
                let mut records =
                    harness::cross_dual_experiment(ctx, &format!("{id}/t={t}"), &model, initial, &m, t, *replicas, duals)?;
                relabel(&mut records, id, &format!("t={t}"));
                out.extend(records);
            }
        }
        Task::OdeOracle { times, replicas, initial, moment: m, duals } => {
            let m = moment(m);
            for &t in times {
                let mut records =
                    harness::ode_oracle_experiment(ctx, &format!("{id}/t={t}"), &model, initial, &m, t, *replicas, duals)?;
                relabel(&mut records, id, &format!("t={t}"));
                out.extend(records);
            }
        }
        Task::MarkovChain { generators, times, replicas } => {
            for (g, q) in generators.iter().enumerate() {
                let mut records = harness::markov_chain_experiment(ctx, &format!("{id}/q{g}"), q, times, *replicas)?;
                relabel(&mut records, id, &format!("Q{g}"));
                out.extend(records);
            }
        }
        Task::HTransform { blocks, replicas } => {
            let k = model.k();
            let rates: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| model.types.pair_rate(i, j)).collect()).collect();
            let sets = blocks.iter().map(|b| TypeSet::parse(b)).collect::<fvdual::Result<Vec<_>>>()?;
            let start = PartitionChain::new(sets, k)?;
            out = harness::h_transform_experiment(ctx, id, &rates, &start, *replicas)?;
        }
        Task::Ergodic { times, replicas, pop_size, initials, moments, trap_horizon, trap_replicas, trap_threshold } => {
            let setup = ErgodicSetup {
                pop_size: *pop_size,
                initial: [initials[0].clone(), initials[1].clone()],
                moments: moments.iter().map(|m| moment(m)).collect(),
                times: times.clone(),
                replicas: *replicas,
                trap_horizon: *trap_horizon,
                trap_replicas: *trap_replicas,
                trap_threshold: *trap_threshold,
            };
            out = harness::ergodic_experiment(ctx, id, &model, &setup)?;
        }
        Task::Decoupling { set, horizon, replicas, far_limit } => {
            out = harness::decoupling_experiment(ctx, id, &model, TypeSet::parse(set)?, *horizon, *replicas, *far_limit)?;
        }
        Task::NeutralMoment { x, pop_size, times, replicas, tolerance } => {
            out = harness::neutral_moment_experiment(ctx, id, *x, model.resampling, *pop_size, times, *replicas, *tolerance)?;
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    experiment: &'a str,
    kind: &'a str,
    check: &'a str,
    lhs_label: &'a str,
    lhs_mean: f64,
    lhs_std_error: f64,
    lhs_replicas: u64,
    lhs_aborts: u64,
    rhs_label: &'a str,
    rhs_mean: f64,
    rhs_std_error: f64,
    rhs_replicas: u64,
    rhs_aborts: u64,
    seed: u64,
    statistic: f64,
    threshold: f64,
    verdict: &'a str,
}

#[derive(Serialize)]
struct Summary {
    checks: usize,
    passed: usize,
    failed: usize,
    info: usize,
}

#[derive(Serialize)]
struct Report<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a Config,
    summary: Summary,
    records: Vec<&'a CheckRecord>,
}

fn summary(outcomes: &[ExperimentOutcome]) -> Summary {
    let records = || outcomes.iter().flat_map(|o| &o.records);
    let count = |v: Verdict| records().filter(|r| r.verdict == v).count();
    Summary { checks: records().count(), passed: count(Verdict::Pass), failed: count(Verdict::Fail), info: count(Verdict::Info) }
}

/// Writes the configured report files and returns their paths. Runtimes are
/// left out so that reruns produce identical files.
pub fn write_reports(config: &Config, outcomes: &[ExperimentOutcome]) -> anyhow::Result<Vec<PathBuf>> {
    let dir = &config.output.dir;
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut written = Vec::new();
    if config.output.csv {
        let path = dir.join(REPORT_CSV);
        write_csv(&path, outcomes).with_context(|| format!("cannot write {}", path.display()))?;
        written.push(path);
    }
    if config.output.json {
        let path = dir.join(REPORT_JSON);
        let report = Report {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            config,
            summary: summary(outcomes),
            records: outcomes.iter().flat_map(|o| &o.records).collect(),
        };
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

fn write_csv(path: &Path, outcomes: &[ExperimentOutcome]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for o in outcomes {
        for r in &o.records {
            w.serialize(CsvRow {
                experiment: &r.experiment,
                kind: o.kind,
                check: &r.check,
                lhs_label: &r.lhs_label,
                lhs_mean: r.lhs.mean,
                lhs_std_error: r.lhs.std_error,
                lhs_replicas: r.lhs.replicas,
                lhs_aborts: r.lhs.aborts,
                rhs_label: &r.rhs_label,
                rhs_mean: r.rhs.mean,
                rhs_std_error: r.rhs.std_error,
                rhs_replicas: r.rhs.replicas,
                rhs_aborts: r.rhs.aborts,
                seed: r.lhs.seed.max(r.rhs.seed),
                statistic: r.statistic,
                threshold: r.threshold,
                verdict: r.verdict.as_str(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Human-readable table of every check followed by per-experiment runtimes.
pub fn summary_table(outcomes: &[ExperimentOutcome]) -> String {
    let rows: Vec<[String; 5]> = outcomes
        .iter()
        .flat_map(|o| &o.records)
        .map(|r| {
            [
                r.experiment.clone(),
                r.check.clone(),
                format!("{:.4}", r.statistic),
                format!("{:.4}", r.threshold),
                r.verdict.as_str().to_uppercase(),
            ]
        })
        .collect();
    let header = ["experiment", "check", "statistic", "threshold", "verdict"].map(String::from);
    let mut widths = header.clone().map(|h| h.len());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = row.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    let s = summary(outcomes);
    let _ = writeln!(out, "\n{} checks: {} pass, {} fail, {} info", s.checks, s.passed, s.failed, s.info);
    for o in outcomes {
        let _ = writeln!(out, "{:<24} {:<15} {:>9.2}s  {} failure(s)", o.id, o.kind, o.elapsed.as_secs_f64(), o.failures());
    }
    out
}
