//! Experiment configuration: a TOML file with `[run]`, `[model]`,
//! `[geography]`, `[[experiment]]` and `[output]` tables.
//!
//! Parsing is two-staged. The raw tree keeps every field optional so that
//! validation can report every problem at once, each with its field path.

use std::fmt;
use std::path::{Path, PathBuf};

use fvdual::geometry::{Geography, MigrationKernel, TypeSet, TypeSpace};
use fvdual::harness::{DualKind, DualSpec, DEFAULT_THRESHOLD};
use fvdual::tableau::PartitionChain;
use fvdual::{Model, PopulationState};
use serde::{Deserialize, Serialize};

/// Every registered experiment kind with a one-line description.
pub const EXPERIMENT_KINDS: [(&str, &str); 8] = [
    ("duality", "forward Moran moment against dual expectations"),
    ("cross-dual", "pairwise agreement between dual kinds"),
    ("ode-oracle", "dual expectations against the exact neutral oracle"),
    ("markov-chain", "set-valued dual of a finite chain against exp(tQ)"),
    ("h-transform", "partition chain absorption and its conditioned mixture"),
    ("ergodic", "moments from two initial states and dual trapping"),
    ("decoupling", "cloud collision frequency against hierarchical distance"),
    ("neutral-moment", "neutral second moment against the closed form"),
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("{}", Problems(.0))]
    Invalid(Vec<String>),
}

struct Problems<'a>(&'a [String]);

impl fmt::Display for Problems<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} validation error(s):", self.0.len())?;
        for p in self.0 {
            write!(f, "\n  {p}")?;
        }
        Ok(())
    }
}

impl ConfigError {
    pub fn problems(&self) -> &[String] {
        match self {
            ConfigError::Invalid(p) => p,
            _ => &[],
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    run: Option<RawRun>,
    model: Option<RawModel>,
    geography: Option<RawGeography>,
    experiment: Option<Vec<RawExperiment>>,
    output: Option<RawOutput>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawRun {
    master_seed: Option<u64>,
    workers: Option<usize>,
    threshold: Option<f64>,
}

#[derive(Deserialize, Clone, Default)]
#[serde(deny_unknown_fields)]
struct RawModel {
    types: Option<usize>,
    fitness: Option<Vec<f64>>,
    mutation_matrix: Option<Vec<Vec<f64>>>,
    mutation_rate: Option<f64>,
    star_rate: Option<f64>,
    base_measure: Option<Vec<f64>>,
    migration_rate: Option<f64>,
    selection: Option<f64>,
    resampling: Option<f64>,
}

#[derive(Deserialize, Clone, Default)]
#[serde(deny_unknown_fields)]
struct RawGeography {
    mode: Option<String>,
    sites: Option<usize>,
    n: Option<usize>,
    depth: Option<usize>,
    level_rates: Option<Vec<f64>>,
}

#[derive(Deserialize, Clone)]
#[serde(untagged)]
enum RawState {
    Uniform(Vec<f64>),
    Sites(Vec<Vec<f64>>),
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    id: Option<String>,
    kind: Option<String>,
    seed: Option<u64>,
    model: Option<RawModel>,
    geography: Option<RawGeography>,
    times: Option<Vec<f64>>,
    replicas: Option<usize>,
    forward_replicas: Option<usize>,
    pop_size: Option<usize>,
    pop_sizes: Option<Vec<usize>>,
    initial: Option<RawState>,
    initials: Option<Vec<RawState>>,
    moment: Option<Vec<(usize, String)>>,
    moments: Option<Vec<Vec<(usize, String)>>>,
    duals: Option<Vec<String>>,
    generators: Option<Vec<Vec<Vec<f64>>>>,
    blocks: Option<Vec<String>>,
    trap_horizon: Option<f64>,
    trap_replicas: Option<usize>,
    trap_threshold: Option<f64>,
    set: Option<String>,
    horizon: Option<f64>,
    far_limit: Option<f64>,
    x: Option<f64>,
    tolerance: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    formats: Option<Vec<String>>,
}

/// A fully validated configuration.
#[derive(Clone, Debug, Serialize)]
pub struct Config {
    pub run: RunConfig,
    pub experiments: Vec<Experiment>,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub master_seed: u64,
    /// 0 uses every available core.
    pub workers: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OutputConfig {
    /// Left out of reports so that a run is reproducible in any directory.
    #[serde(skip)]
    pub dir: PathBuf,
    pub csv: bool,
    pub json: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub types: usize,
    pub fitness: Vec<f64>,
    pub mutation_matrix: Vec<Vec<f64>>,
    pub mutation_rate: f64,
    pub star_rate: f64,
    pub base_measure: Vec<f64>,
    pub migration_rate: f64,
    pub selection: f64,
    pub resampling: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum GeographyConfig {
    Single,
    Island { sites: usize },
    Hierarchical { n: usize, depth: usize, level_rates: Vec<f64> },
}

impl GeographyConfig {
    fn geography(&self) -> Geography {
        match self {
            GeographyConfig::Single => Geography::Single,
            GeographyConfig::Island { sites } => Geography::Island { sites: *sites },
            GeographyConfig::Hierarchical { n, depth, level_rates } => {
                Geography::Hierarchical { n: *n, depth: *depth, level_rates: level_rates.clone() }
            }
        }
    }
}

/// One factor `x_site(set)` of a product moment; `set` is a 0/1 string.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Factor {
    pub site: usize,
    pub set: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Experiment {
    pub id: String,
    /// Overrides the master seed for this experiment only.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub geography: GeographyConfig,
    pub task: Task,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Task {
    Duality {
        times: Vec<f64>,
        pop_sizes: Vec<usize>,
        forward_replicas: usize,
        replicas: usize,
        initial: PopulationState,
        moment: Vec<Factor>,
        duals: Vec<DualSpec>,
    },
    CrossDual { times: Vec<f64>, replicas: usize, initial: PopulationState, moment: Vec<Factor>, duals: Vec<DualSpec> },
    OdeOracle { times: Vec<f64>, replicas: usize, initial: PopulationState, moment: Vec<Factor>, duals: Vec<DualSpec> },
    MarkovChain { generators: Vec<Vec<Vec<f64>>>, times: Vec<f64>, replicas: usize },
    HTransform { blocks: Vec<String>, replicas: usize },
    Ergodic {
        times: Vec<f64>,
        replicas: usize,
        pop_size: usize,
        initials: Vec<PopulationState>,
        moments: Vec<Vec<Factor>>,
        trap_horizon: f64,
        trap_replicas: usize,
        trap_threshold: f64,
    },
    Decoupling { set: String, horizon: f64, replicas: usize, far_limit: f64 },
    NeutralMoment { x: f64, pop_size: usize, times: Vec<f64>, replicas: usize, tolerance: f64 },
}

impl Task {
    pub fn kind(&self) -> &'static str {
        match self {
            Task::Duality { .. } => "duality",
            Task::CrossDual { .. } => "cross-dual",
            Task::OdeOracle { .. } => "ode-oracle",
            Task::MarkovChain { .. } => "markov-chain",
            Task::HTransform { .. } => "h-transform",
            Task::Ergodic { .. } => "ergodic",
            Task::Decoupling { .. } => "decoupling",
            Task::NeutralMoment { .. } => "neutral-moment",
        }
    }
}

impl Experiment {
    pub fn build_model(&self) -> fvdual::Result<Model> {
        build_model(&self.model, &self.geography)
    }
}

pub fn build_model(m: &ModelConfig, g: &GeographyConfig) -> fvdual::Result<Model> {
    let types = TypeSpace::new(
        m.fitness.clone(),
        m.mutation_matrix.clone(),
        m.mutation_rate,
        m.star_rate,
        m.base_measure.clone(),
    )?;
    let kernel = match g {
        GeographyConfig::Single => MigrationKernel::single(),
        _ => MigrationKernel::new(m.migration_rate, g.geography())?,
    };
    Model::new(types, kernel, m.selection, m.resampling)
}

pub fn moment(factors: &[Factor]) -> fvdual::forward::ProductMoment {
    fvdual::forward::ProductMoment::new(
        factors.iter().map(|f| (f.site, TypeSet::parse(&f.set).expect("validated type set"))).collect(),
    )
}

pub fn parse_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    parse_config_str(&text).map_err(|e| match e {
        ConfigError::Syntax { message, .. } => ConfigError::Syntax { path: path.into(), message },
        other => other,
    })
}

pub fn parse_config_str(text: &str) -> Result<Config, ConfigError> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| ConfigError::Syntax { path: PathBuf::new(), message: e.to_string() })?;
    let mut v = Validator::default();
    let config = v.config(raw);
    let mut seen = std::collections::HashSet::new();
    v.errors.retain(|e| seen.insert(e.clone()));
    match config {
        Some(c) if v.errors.is_empty() => Ok(c),
        _ => Err(ConfigError::Invalid(v.errors)),
    }
}

#[derive(Default)]
struct Validator {
    errors: Vec<String>,
}

impl Validator {
    fn push(&mut self, path: &str, message: impl fmt::Display) {
        self.errors.push(format!("{path}: {message}"));
    }

    fn required<T>(&mut self, path: &str, value: Option<T>) -> Option<T> {
        if value.is_none() {
            self.push(path, "missing field");
        }
        value
    }

    fn nonnegative(&mut self, path: &str, v: f64) {
        if !(v >= 0.0 && v.is_finite()) {
            self.push(path, format!("{v} must be finite and >= 0"));
        }
    }

    fn at_least(&mut self, path: &str, v: usize, min: usize) {
        if v < min {
            self.push(path, format!("{v} must be at least {min}"));
        }
    }

    fn config(&mut self, raw: RawConfig) -> Option<Config> {
        let run = raw.run.unwrap_or_default();
        let threshold = run.threshold.unwrap_or(DEFAULT_THRESHOLD);
        if !(threshold > 0.0 && threshold.is_finite()) {
            self.push("run.threshold", format!("{threshold} must be finite and > 0"));
        }
        let run = RunConfig { master_seed: run.master_seed.unwrap_or(0), workers: run.workers.unwrap_or(0), threshold };

        let output = raw.output.unwrap_or_default();
        let formats = output.formats.unwrap_or_else(|| vec!["csv".into(), "json".into()]);
        for (i, f) in formats.iter().enumerate() {
            if f != "csv" && f != "json" {
                self.push(&format!("output.formats[{i}]"), format!("unknown format {f:?}, expected \"csv\" or \"json\""));
            }
        }
        let output = OutputConfig {
            dir: output.dir.unwrap_or_else(|| PathBuf::from("report")),
            csv: formats.iter().any(|f| f == "csv"),
            json: formats.iter().any(|f| f == "json"),
        };

        if let Some(m) = &raw.model {
            if let Some(model) = self.model("model", Some(m.clone())) {
                self.geography("geography", raw.geography.clone().unwrap_or_default(), model.migration_rate);
            }
        }
        let raw_experiments = raw.experiment.unwrap_or_default();
        if raw_experiments.is_empty() {
            self.push("experiment", "at least one [[experiment]] is required");
        }
        let mut experiments = Vec::new();
        let mut ids: Vec<String> = Vec::new();
        for (i, e) in raw_experiments.into_iter().enumerate() {
            let path = format!("experiment[{i}]");
            if let Some(id) = &e.id {
                if ids.contains(id) {
                    self.push(&format!("{path}.id"), format!("duplicate id {id:?}"));
                }
                ids.push(id.clone());
            }
            let model = e.model.clone().or_else(|| raw.model.clone());
            let geography = e.geography.clone().or_else(|| raw.geography.clone()).unwrap_or_default();
            let model_path = if e.model.is_some() { format!("{path}.model") } else { "model".into() };
            let geo_path = if e.geography.is_some() { format!("{path}.geography") } else { "geography".into() };
            if let Some(exp) = self.experiment(&path, e, model, &model_path, geography, &geo_path) {
                experiments.push(exp);
            }
        }
        Some(Config { run, experiments, output })
    }

    fn model(&mut self, path: &str, raw: Option<RawModel>) -> Option<ModelConfig> {
        let Some(raw) = raw else {
            self.push(path, "missing table; give [model] or an experiment-level model");
            return None;
        };
        let fitness = self.required(&format!("{path}.fitness"), raw.fitness);
        let mutation_matrix = self.required(&format!("{path}.mutation_matrix"), raw.mutation_matrix);
        let mutation_rate = self.required(&format!("{path}.mutation_rate"), raw.mutation_rate);
        let selection = self.required(&format!("{path}.selection"), raw.selection);
        let resampling = self.required(&format!("{path}.resampling"), raw.resampling);
        let star_rate = raw.star_rate.unwrap_or(0.0);
        let base_measure = raw.base_measure.unwrap_or_default();
        let migration_rate = raw.migration_rate.unwrap_or(0.0);
        for (name, v) in [("selection", selection), ("resampling", resampling), ("migration_rate", Some(migration_rate))] {
            if let Some(v) = v {
                self.nonnegative(&format!("{path}.{name}"), v);
            }
        }
        let fitness = fitness?;
        if let Some(k) = raw.types {
            if k != fitness.len() {
                self.push(&format!("{path}.types"), format!("K = {k} but fitness lists {} types", fitness.len()));
            }
        }
        let mutation_matrix = mutation_matrix?;
        let mutation_rate = mutation_rate?;
        let before = self.errors.len();
        for p in TypeSpace::problems(&fitness, &mutation_matrix, mutation_rate, star_rate, &base_measure) {
            self.push(path, p);
        }
        if self.errors.len() > before {
            return None;
        }
        Some(ModelConfig {
            types: fitness.len(),
            fitness,
            mutation_matrix,
            mutation_rate,
            star_rate,
            base_measure,
            migration_rate,
            selection: selection?,
            resampling: resampling?,
        })
    }

    fn geography(&mut self, path: &str, raw: RawGeography, migration_rate: f64) -> Option<GeographyConfig> {
        let mode = raw.mode.unwrap_or_else(|| "single".into());
        let g = match mode.as_str() {
            "single" => GeographyConfig::Single,
            "island" => {
                let sites = self.required(&format!("{path}.sites"), raw.sites)?;
                self.at_least(&format!("{path}.sites"), sites, 1);
                GeographyConfig::Island { sites }
            }
            "hierarchical" => {
                let n = self.required(&format!("{path}.n"), raw.n);
                let depth = self.required(&format!("{path}.depth"), raw.depth);
                let level_rates = self.required(&format!("{path}.level_rates"), raw.level_rates);
                let (n, depth, level_rates) = (n?, depth?, level_rates?);
                if depth > 0 && n > 1 && (n as f64).powi(depth as i32) > 1e6 {
                    self.push(path, format!("{n}^{depth} sites is too many"));
                    return None;
                }
                GeographyConfig::Hierarchical { n, depth, level_rates }
            }
            other => {
                self.push(&format!("{path}.mode"), format!("unknown mode {other:?}, expected single, island or hierarchical"));
                return None;
            }
        };
        if g != GeographyConfig::Single {
            if let Err(e) = MigrationKernel::new(migration_rate, g.geography()) {
                self.push(path, e);
                return None;
            }
        }
        Some(g)
    }

    fn experiment(
        &mut self,
        path: &str,
        e: RawExperiment,
        model: Option<RawModel>,
        model_path: &str,
        geography: RawGeography,
        geo_path: &str,
    ) -> Option<Experiment> {
        let id = self.required(&format!("{path}.id"), e.id.clone());
        let kind = self.required(&format!("{path}.kind"), e.kind.clone());
        let model = self.model(model_path, model);
        let geography = model.as_ref().and_then(|m| self.geography(geo_path, geography, m.migration_rate));
        let kind = kind?;
        if !EXPERIMENT_KINDS.iter().any(|(k, _)| *k == kind) {
            let names: Vec<&str> = EXPERIMENT_KINDS.iter().map(|k| k.0).collect();
            self.push(&format!("{path}.kind"), format!("unknown kind {kind:?}, expected one of {}", names.join(", ")));
            return None;
        }
        self.unused_fields(path, &kind, &e);
        let (model, geography) = (model?, geography?);
        let built = match build_model(&model, &geography) {
            Ok(m) => m,
            Err(err) => {
                self.push(model_path, err);
                return None;
            }
        };
        let seed = e.seed;
        let task = self.task(path, &kind, e, &built, model_path)?;
        Some(Experiment { id: id?, seed, model, geography, task })
    }

    fn unused_fields(&mut self, path: &str, kind: &str, e: &RawExperiment) {
        let allowed: &[&str] = match kind {
            "duality" => &["times", "pop_sizes", "forward_replicas", "replicas", "initial", "moment", "duals"],
            "cross-dual" | "ode-oracle" => &["times", "replicas", "initial", "moment", "duals"],
            "markov-chain" => &["generators", "times", "replicas"],
            "h-transform" => &["blocks", "replicas"],
            "ergodic" => &["times", "replicas", "pop_size", "initials", "moments", "trap_horizon", "trap_replicas", "trap_threshold"],
            "decoupling" => &["set", "horizon", "replicas", "far_limit"],
            _ => &["x", "pop_size", "times", "replicas", "tolerance"],
        };
        let present = [
            ("times", e.times.is_some()),
            ("replicas", e.replicas.is_some()),
            ("forward_replicas", e.forward_replicas.is_some()),
            ("pop_size", e.pop_size.is_some()),
            ("pop_sizes", e.pop_sizes.is_some()),
            ("initial", e.initial.is_some()),
            ("initials", e.initials.is_some()),
            ("moment", e.moment.is_some()),
            ("moments", e.moments.is_some()),
            ("duals", e.duals.is_some()),
            ("generators", e.generators.is_some()),
            ("blocks", e.blocks.is_some()),
            ("trap_horizon", e.trap_horizon.is_some()),
            ("trap_replicas", e.trap_replicas.is_some()),
            ("trap_threshold", e.trap_threshold.is_some()),
            ("set", e.set.is_some()),
            ("horizon", e.horizon.is_some()),
            ("far_limit", e.far_limit.is_some()),
            ("x", e.x.is_some()),
            ("tolerance", e.tolerance.is_some()),
        ];
        for (name, set) in present {
            if set && !allowed.contains(&name) {
                self.push(&format!("{path}.{name}"), format!("not used by kind {kind:?}"));
            }
        }
    }

    fn times(&mut self, path: &str, times: Option<Vec<f64>>) -> Option<Vec<f64>> {
        let times = self.required(path, times)?;
        if times.is_empty() {
            self.push(path, "needs at least one time");
        }
        for (i, t) in times.iter().enumerate() {
            self.nonnegative(&format!("{path}[{i}]"), *t);
        }
        Some(times)
    }

    fn replicas(&mut self, path: &str, n: Option<usize>) -> Option<usize> {
        let n = self.required(path, n)?;
        self.at_least(path, n, 2);
        Some(n)
    }

    fn type_set(&mut self, path: &str, s: &str, k: usize) -> Option<TypeSet> {
        let trimmed = s.trim().trim_start_matches('(').trim_end_matches(')');
        if trimmed.len() != k {
            self.push(path, format!("{s:?} must have one 0/1 digit per type ({k})"));
            return None;
        }
        match TypeSet::parse(trimmed) {
            Ok(set) => Some(set),
            Err(err) => {
                self.push(path, err);
                None
            }
        }
    }

    fn state(&mut self, path: &str, raw: Option<RawState>, model: &Model) -> Option<PopulationState> {
        let raw = self.required(path, raw)?;
        let sites = match raw {
            RawState::Uniform(x) => vec![x; model.site_count()],
            RawState::Sites(s) => s,
        };
        if sites.len() != model.site_count() {
            self.push(path, format!("gives {} sites, the geography has {}", sites.len(), model.site_count()));
            return None;
        }
        if let Some(i) = sites.iter().position(|x| x.len() != model.k()) {
            self.push(&format!("{path}[{i}]"), format!("must have {} entries", model.k()));
            return None;
        }
        match PopulationState::new(sites) {
            Ok(x) => Some(x),
            Err(err) => {
                self.push(path, err);
                None
            }
        }
    }

    fn moment(&mut self, path: &str, raw: Option<Vec<(usize, String)>>, model: &Model) -> Option<Vec<Factor>> {
        let raw = self.required(path, raw)?;
        if raw.is_empty() {
            self.push(path, "needs at least one factor");
            return None;
        }
        let mut ok = true;
        for (i, (site, set)) in raw.iter().enumerate() {
            if *site >= model.site_count() {
                self.push(&format!("{path}[{i}]"), format!("site {site} is outside 0..{}", model.site_count()));
                ok = false;
            }
            ok &= self.type_set(&format!("{path}[{i}]"), set, model.k()).is_some();
        }
        ok.then(|| raw.into_iter().map(|(site, set)| Factor { site, set }).collect())
    }

    fn duals(&mut self, path: &str, raw: Option<Vec<String>>, model: &Model, times: &[f64]) -> Option<Vec<DualSpec>> {
        let raw = self.required(path, raw)?;
        if raw.is_empty() {
            self.push(path, "needs at least one dual");
        }
        let mut out = Vec::new();
        for (i, label) in raw.iter().enumerate() {
            let p = format!("{path}[{i}]");
            let mut parts = label.split('+');
            let Some(kind) = DualKind::parse(parts.next().unwrap_or_default()) else {
                let names: Vec<&str> = DualKind::ALL.iter().map(|k| k.name()).collect();
                self.push(&p, format!("unknown dual {label:?}, expected one of {} with optional +star or +jumps", names.join(", ")));
                continue;
            };
            let mut spec = DualSpec::plain(kind);
            let mut valid = true;
            for m in parts {
                match m {
                    "star" => spec.star = true,
                    "jumps" => spec.random_jumps = true,
                    other => {
                        self.push(&p, format!("unknown modifier {other:?}"));
                        valid = false;
                    }
                }
            }
            if !valid {
                continue;
            }
            if let Err(err) = spec.validate(model) {
                self.push(&p, err);
                continue;
            }
            if kind == DualKind::Fk && model.selection > 0.0 {
                let limit = std::f64::consts::LN_2 / model.selection;
                if let Some(t) = times.iter().find(|t| **t >= limit) {
                    self.push(&p, format!("time {t} is outside the Feynman-Kac window t < ln2/s = {limit:.4}"));
                    continue;
                }
            }
            out.push(spec);
        }
        Some(out)
    }

    fn task(&mut self, path: &str, kind: &str, e: RawExperiment, model: &Model, model_path: &str) -> Option<Task> {
        let field = |name: &str| format!("{path}.{name}");
        match kind {
            "duality" | "cross-dual" | "ode-oracle" => {
                let times = self.times(&field("times"), e.times);
                let replicas = self.replicas(&field("replicas"), e.replicas);
                let initial = self.state(&field("initial"), e.initial, model);
                let moment = self.moment(&field("moment"), e.moment, model);
                let duals = self.duals(&field("duals"), e.duals, model, times.as_deref().unwrap_or(&[]));
                if kind == "ode-oracle" && (model.selection != 0.0 || model.site_count() != 1) {
                    self.push(path, "the exact oracle needs selection = 0 and a single site");
                }
                if kind == "cross-dual" && duals.as_ref().is_some_and(|d| d.len() < 2) {
                    self.push(&field("duals"), "needs at least two duals to compare");
                }
                if kind == "duality" {
                    let pop_sizes = self.required(&field("pop_sizes"), e.pop_sizes);
                    if let Some(p) = &pop_sizes {
                        if p.is_empty() {
                            self.push(&field("pop_sizes"), "needs at least one population size");
                        }
                        for (i, n) in p.iter().enumerate() {
                            self.at_least(&format!("{}[{i}]", field("pop_sizes")), *n, 2);
                        }
                    }
                    let forward_replicas = self.replicas(&field("forward_replicas"), e.forward_replicas);
                    return Some(Task::Duality {
                        times: times?,
                        pop_sizes: pop_sizes?,
                        forward_replicas: forward_replicas?,
                        replicas: replicas?,
                        initial: initial?,
                        moment: moment?,
                        duals: duals?,
                    });
                }
                let (times, replicas, initial, moment, duals) = (times?, replicas?, initial?, moment?, duals?);
                Some(if kind == "cross-dual" {
                    Task::CrossDual { times, replicas, initial, moment, duals }
                } else {
                    Task::OdeOracle { times, replicas, initial, moment, duals }
                })
            }
            "markov-chain" => {
                let times = self.times(&field("times"), e.times);
                let replicas = self.replicas(&field("replicas"), e.replicas);
                let generators = self.required(&field("generators"), e.generators);
                for (g, q) in generators.iter().flatten().enumerate() {
                    let p = format!("{}[{g}]", field("generators"));
                    let k = q.len();
                    if k == 0 || k > 64 || q.iter().any(|r| r.len() != k) {
                        self.push(&p, "must be a square matrix with 1 to 64 rows");
                        continue;
                    }
                    for (i, row) in q.iter().enumerate() {
                        if row.iter().enumerate().any(|(j, r)| i != j && !(*r >= 0.0 && r.is_finite())) {
                            self.push(&format!("{p}[{i}]"), "off-diagonal rates must be finite and >= 0");
                        }
                        let sum: f64 = row.iter().sum();
                        if sum.abs() > 1e-9 {
                            self.push(&format!("{p}[{i}]"), format!("row sums to {sum}, a generator row must sum to 0"));
                        }
                    }
                }
                Some(Task::MarkovChain { generators: generators?, times: times?, replicas: replicas? })
            }
            "h-transform" => {
                let replicas = self.replicas(&field("replicas"), e.replicas);
                let blocks = self.required(&field("blocks"), e.blocks)?;
                let sets: Option<Vec<TypeSet>> = blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| self.type_set(&format!("{}[{i}]", field("blocks")), b, model.k()))
                    .collect();
                if let Some(sets) = sets {
                    if let Err(err) = PartitionChain::new(sets, model.k()) {
                        self.push(&field("blocks"), err);
                    }
                }
                Some(Task::HTransform { blocks, replicas: replicas? })
            }
            "ergodic" => {
                let times = self.times(&field("times"), e.times);
                let replicas = self.replicas(&field("replicas"), e.replicas);
                let pop_size = self.required(&field("pop_size"), e.pop_size);
                if let Some(n) = pop_size {
                    self.at_least(&field("pop_size"), n, 2);
                }
                let initials = self.required(&field("initials"), e.initials).and_then(|list| {
                    if list.len() != 2 {
                        self.push(&field("initials"), format!("needs exactly two initial states, got {}", list.len()));
                        return None;
                    }
                    let states: Vec<Option<PopulationState>> = list
                        .into_iter()
                        .enumerate()
                        .map(|(i, s)| self.state(&format!("{}[{i}]", field("initials")), Some(s), model))
                        .collect();
                    states.into_iter().collect::<Option<Vec<_>>>()
                });
                let moments = self.required(&field("moments"), e.moments).and_then(|list| {
                    if list.is_empty() {
                        self.push(&field("moments"), "needs at least one moment");
                        return None;
                    }
                    let parsed: Vec<Option<Vec<Factor>>> = list
                        .into_iter()
                        .enumerate()
                        .map(|(i, m)| self.moment(&format!("{}[{i}]", field("moments")), Some(m), model))
                        .collect();
                    parsed.into_iter().collect::<Option<Vec<_>>>()
                });
                let trap_horizon = self.required(&field("trap_horizon"), e.trap_horizon);
                if let Some(t) = trap_horizon {
                    self.nonnegative(&field("trap_horizon"), t);
                }
                let trap_replicas = self.replicas(&field("trap_replicas"), e.trap_replicas);
                let trap_threshold = self.required(&field("trap_threshold"), e.trap_threshold);
                if let Some(q) = trap_threshold {
                    if !(0.0..=1.0).contains(&q) {
                        self.push(&field("trap_threshold"), format!("{q} must lie in [0, 1]"));
                    }
                }
                let k = model.k();
                if (0..k).any(|i| (0..k).any(|j| i != j && model.types.pair_rate(i, j) <= 0.0)) {
                    self.push(
                        &format!("{model_path}.mutation_matrix"),
                        "the ergodic theorem needs every mutation rate m*M(i,j) > 0 for i != j",
                    );
                }
                Some(Task::Ergodic {
                    times: times?,
                    replicas: replicas?,
                    pop_size: pop_size?,
                    initials: initials?,
                    moments: moments?,
                    trap_horizon: trap_horizon?,
                    trap_replicas: trap_replicas?,
                    trap_threshold: trap_threshold?,
                })
            }
            "decoupling" => {
                let set = self.required(&field("set"), e.set);
                let set_ok = set.as_ref().and_then(|s| self.type_set(&field("set"), s, model.k()));
                let horizon = self.required(&field("horizon"), e.horizon);
                if let Some(t) = horizon {
                    self.nonnegative(&field("horizon"), t);
                }
                let replicas = self.replicas(&field("replicas"), e.replicas);
                let far_limit = self.required(&field("far_limit"), e.far_limit);
                if let Some(f) = far_limit {
                    if !(f > 0.0 && f <= 1.0) {
                        self.push(&field("far_limit"), format!("{f} must lie in (0, 1]"));
                    }
                }
                if !matches!(model.kernel.geography(), Geography::Hierarchical { .. }) {
                    self.push(path, "decoupling needs a hierarchical geography");
                }
                set_ok?;
                Some(Task::Decoupling { set: set?, horizon: horizon?, replicas: replicas?, far_limit: far_limit? })
            }
            _ => {
                let x = self.required(&field("x"), e.x);
                if let Some(x) = x {
                    if !(x > 0.0 && x < 1.0) {
                        self.push(&field("x"), format!("{x} must lie in (0, 1)"));
                    }
                }
                let pop_size = self.required(&field("pop_size"), e.pop_size);
                if let Some(n) = pop_size {
                    self.at_least(&field("pop_size"), n, 2);
                }
                let times = self.times(&field("times"), e.times);
                let replicas = self.replicas(&field("replicas"), e.replicas);
                let tolerance = self.required(&field("tolerance"), e.tolerance);
                if let Some(t) = tolerance {
                    self.nonnegative(&field("tolerance"), t);
                }
                if model.selection != 0.0 || model.types.mutation_rate() != 0.0 || model.site_count() != 1 || model.k() != 2 {
                    self.push(path, "the neutral moment check needs K = 2, selection = 0, mutation_rate = 0 and a single site");
                }
                Some(Task::NeutralMoment {
                    x: x?,
                    pop_size: pop_size?,
                    times: times?,
                    replicas: replicas?,
                    tolerance: tolerance?,
                })
            }
        }
    }
}
