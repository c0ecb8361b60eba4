//! Monte Carlo estimation of both sides of the duality relations, exact
//! oracles for small instances, and the experiments built from them.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{simulate_forward, MomentTestFunction, MoranSystem, ProductMoment};
use crate::function::{run_fk_dual, run_plus_dual, DualFunction, FunctionDualOptions, MutationMode, SelectionRule};
use crate::geometry::{Geography, HierarchicalAddress, TypeSet};
use crate::markov::transition_matrix;
use crate::model::{Model, PopulationState};
use crate::particle::{DualParticleState, Location};
use crate::refined::{drive_indicator_dual, markov_chain_set_dual, run_refined_dual, IndicatorSum, RefinedVariant};
use crate::tableau::{
    simulate_set_dual, Column, ConditionedMixture, PartitionChain, PartitionChainModel, RankedTableau, SetDualOptions,
    Tableau,
};

/// Default pass threshold on `|lhs - rhs| / sqrt(se_lhs^2 + se_rhs^2)`.
pub const DEFAULT_THRESHOLD: f64 = 4.0;

/// Per-replica generator from the master seed, experiment, side and replica.
pub fn replica_rng(master: u64, experiment: &str, side: &str, replica: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((experiment.len() as u64).to_le_bytes());
    hasher.update(experiment.as_bytes());
    hasher.update((side.len() as u64).to_le_bytes());
    hasher.update(side.as_bytes());
    hasher.update(replica.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Running mean and sum of squared deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n as f64;
        self.count = n;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }
}

/// Replicas are folded in fixed-size chunks, in order, so the result does
/// not depend on the worker count.
const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub replicas: u64,
    pub aborts: u64,
    pub seed: u64,
}

impl Estimate {
    pub fn from_values(values: &[f64], aborts: u64, seed: u64) -> Self {
        let mut total = Welford::default();
        for chunk in values.chunks(CHUNK) {
            let mut w = Welford::default();
            chunk.iter().for_each(|v| w.push(*v));
            total.merge(&w);
        }
        let n = total.count();
        let std_error = if n > 0 { (total.variance() / n as f64).sqrt() } else { 0.0 };
        Self { mean: total.mean(), std_error, replicas: n, aborts, seed }
    }

    /// A known value with no sampling error.
    pub fn exact(value: f64) -> Self {
        Self { mean: value, std_error: 0.0, replicas: 0, aborts: 0, seed: 0 }
    }
}

/// `|a - b| / sqrt(se_a^2 + se_b^2)`, 0 for equal exact values.
pub fn z_score(a: &Estimate, b: &Estimate) -> f64 {
    let diff = (a.mean - b.mean).abs();
    let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    if se > 0.0 {
        diff / se
    } else if diff <= 1e-12 * (1.0 + a.mean.abs()) {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    /// Reported, not judged.
    Info,
}

impl Verdict {
    pub fn from_pass(pass: bool) -> Self {
        if pass {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Info => "info",
        }
    }
}

/// One line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub experiment: String,
    pub check: String,
    pub lhs_label: String,
    pub lhs: Estimate,
    pub rhs_label: String,
    pub rhs: Estimate,
    /// The z-score for comparisons, otherwise the check's own statistic.
    pub statistic: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

impl CheckRecord {
    /// Two-sided comparison passing when `z <= threshold`.
    pub fn comparison(
        experiment: &str,
        check: &str,
        lhs_label: &str,
        lhs: Estimate,
        rhs_label: &str,
        rhs: Estimate,
        threshold: f64,
    ) -> Self {
        let z = z_score(&lhs, &rhs);
        Self {
            experiment: experiment.into(),
            check: check.into(),
            lhs_label: lhs_label.into(),
            lhs,
            rhs_label: rhs_label.into(),
            rhs,
            statistic: z,
            threshold,
            verdict: Verdict::from_pass(z <= threshold),
        }
    }

    /// A statistic judged against a threshold by the caller.
    pub fn statistic(
        experiment: &str,
        check: &str,
        value: Estimate,
        statistic: f64,
        threshold: f64,
        verdict: Verdict,
    ) -> Self {
        Self {
            experiment: experiment.into(),
            check: check.into(),
            lhs_label: check.into(),
            lhs: value,
            rhs_label: String::new(),
            rhs: Estimate::exact(threshold),
            statistic,
            threshold,
            verdict,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict != Verdict::Fail
    }
}

/// Master seed, pass threshold and worker pool shared by all experiments.
#[derive(Clone)]
pub struct Context {
    pub master_seed: u64,
    pub threshold: f64,
    pool: Arc<rayon::ThreadPool>,
}

impl Context {
    /// `workers == 0` uses one worker per available core.
    pub fn new(master_seed: u64, workers: usize, threshold: f64) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Parameter(format!("cannot start worker pool: {e}")))?;
        Ok(Self { master_seed, threshold, pool: Arc::new(pool) })
    }

    /// Runs `n` replicas with independent streams. Aborted replicas are
    /// counted and skipped; any other error stops the run.
    pub fn run_replicas<T, F>(&self, experiment: &str, side: &str, n: usize, f: F) -> Result<(Vec<T>, u64)>
    where
        T: Send,
        F: Fn(&mut ChaCha8Rng) -> Result<T> + Sync,
    {
        let master = self.master_seed;
        let results: Vec<Result<T>> = self.pool.install(|| {
            (0..n as u64)
                .into_par_iter()
                .map(|r| f(&mut replica_rng(master, experiment, side, r)))
                .collect()
        });
        let mut values = Vec::with_capacity(n);
        let mut aborts = 0;
        for r in results {
            match r {
                Ok(v) => values.push(v),
                Err(Error::Aborted(_)) => aborts += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((values, aborts))
    }

    pub fn estimate<F>(&self, experiment: &str, side: &str, n: usize, f: F) -> Result<Estimate>
    where
        F: Fn(&mut ChaCha8Rng) -> Result<f64> + Sync,
    {
        let (values, aborts) = self.run_replicas(experiment, side, n, f)?;
        Ok(Estimate::from_values(&values, aborts, self.master_seed))
    }

    /// Several statistics from the same replicas.
    pub fn estimate_many<F>(&self, experiment: &str, side: &str, n: usize, dims: usize, f: F) -> Result<Vec<Estimate>>
    where
        F: Fn(&mut ChaCha8Rng) -> Result<Vec<f64>> + Sync,
    {
        let (values, aborts) = self.run_replicas(experiment, side, n, |rng| {
            let v = f(rng)?;
            if v.len() != dims {
                return Err(Error::Contract(format!("replica returned {} values, expected {dims}", v.len())));
            }
            Ok(v)
        })?;
        Ok((0..dims)
            .map(|d| {
                let column: Vec<f64> = values.iter().map(|v| v[d]).collect();
                Estimate::from_values(&column, aborts, self.master_seed)
            })
            .collect())
    }
}

/// The dual processes available for estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualKind {
    /// Signed function dual with Feynman-Kac weight.
    Fk,
    Plus,
    #[serde(rename = "gplus")]
    GPlus,
    /// Indicator sums with the uncoupled birth rule.
    Refined,
    /// Indicator sums with the coupled birth rule.
    RefinedHat,
    /// Ranked tableau following the particle process.
    Tableau,
    /// Autonomous set-valued dual on active ranks.
    SetValued,
}

impl DualKind {
    pub const ALL: [DualKind; 7] = [
        DualKind::Fk,
        DualKind::Plus,
        DualKind::GPlus,
        DualKind::Refined,
        DualKind::RefinedHat,
        DualKind::Tableau,
        DualKind::SetValued,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DualKind::Fk => "fk",
            DualKind::Plus => "plus",
            DualKind::GPlus => "gplus",
            DualKind::Refined => "refined",
            DualKind::RefinedHat => "refined-hat",
            DualKind::Tableau => "tableau",
            DualKind::SetValued => "set-valued",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// A dual kind with its modifications.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualSpec {
    pub kind: DualKind,
    /// Route the state-independent mutation part through the star site.
    pub star: bool,
    /// Random mutation jumps instead of the deterministic flow.
    pub random_jumps: bool,
}

impl DualSpec {
    pub fn plain(kind: DualKind) -> Self {
        Self { kind, star: false, random_jumps: false }
    }

    pub fn label(&self) -> String {
        let mut s = self.kind.name().to_string();
        if self.star {
            s.push_str("+star");
        }
        if self.random_jumps {
            s.push_str("+jumps");
        }
        s
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.star && model.types.star_rate() <= 0.0 {
            return Err(Error::Parameter(format!("{}: the star site needs a positive state-independent rate", self.label())));
        }
        if self.star && matches!(self.kind, DualKind::Fk | DualKind::SetValued) {
            return Err(Error::Unsupported(format!("{} has no star-site variant", self.kind.name())));
        }
        if self.random_jumps && !matches!(self.kind, DualKind::Plus | DualKind::GPlus) {
            return Err(Error::Unsupported(format!("{} always uses set-valued jumps", self.kind.name())));
        }
        Ok(())
    }
}

fn site_locations(moment: &ProductMoment) -> Vec<Location> {
    moment.sites().into_iter().map(Location::Site).collect()
}

/// One replica of `spec` started from the dual of `moment`, evaluated against
/// `x0`. Norm and structural violations are errors.
pub fn dual_sample<R: rand::Rng + ?Sized>(
    model: &Model,
    x0: &PopulationState,
    moment: &ProductMoment,
    horizon: f64,
    spec: &DualSpec,
    rng: &mut R,
) -> Result<f64> {
    let k = model.k();
    let rho = model.types.base_measure();
    let locations = site_locations(moment);
    let eta0 = DualParticleState::new(&locations)?;
    let sets = moment.sets();
    match spec.kind {
        DualKind::Fk | DualKind::Plus | DualKind::GPlus => {
            let f0 = DualFunction::indicator_product(k, &sets);
            let run = if spec.kind == DualKind::Fk {
                run_fk_dual(&eta0, &f0, model, horizon, rng, false)?
            } else {
                let mut options =
                    FunctionDualOptions::new(if spec.kind == DualKind::Plus { SelectionRule::Plus } else { SelectionRule::GPlus });
                options.star = spec.star;
                options.mutation = if spec.random_jumps { MutationMode::RandomJump } else { MutationMode::Flow };
                run_plus_dual(&eta0, &f0, model, horizon, rng, &options)?
            };
            if run.norm_violations > 0 {
                return Err(Error::Contract(format!("{} norm violations in one replica", run.norm_violations)));
            }
            run.value(x0, rho)
        }
        DualKind::Refined | DualKind::RefinedHat => {
            let variant = if spec.kind == DualKind::Refined { RefinedVariant::Psi } else { RefinedVariant::PsiHat };
            let f0 = IndicatorSum::product(k, &sets)?;
            run_refined_dual(&eta0, &f0, model, horizon, rng, variant, spec.star)?.value(x0, rho)
        }
        DualKind::Tableau => {
            let factors: Vec<(Location, TypeSet)> = locations.iter().copied().zip(sets).collect();
            let mut dual = RankedTableau::new(Tableau::product(k, &factors)?);
            drive_indicator_dual(&mut dual, &eta0, model, spec.star, horizon, rng, |d| {
                if !d.tableau.is_pruned() {
                    return Err(Error::Contract("tableau not pruned after an event".into()));
                }
                Ok(())
            })?;
            Ok(dual.tableau.evaluate(x0, rho))
        }
        DualKind::SetValued => {
            let factors: Vec<(Location, TypeSet)> = locations.iter().copied().zip(sets).collect();
            let g0 = Tableau::product(k, &factors)?;
            let run = simulate_set_dual(&g0, model, horizon, rng, &SetDualOptions::default())?;
            Ok(run.tableau.evaluate(x0, rho))
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_dual_expectation(
    ctx: &Context,
    experiment: &str,
    model: &Model,
    x0: &PopulationState,
    moment: &ProductMoment,
    horizon: f64,
    replicas: usize,
    spec: &DualSpec,
) -> Result<Estimate> {
    spec.validate(model)?;
    let side = format!("dual:{}", spec.label());
    ctx.estimate(experiment, &side, replicas, |rng| dual_sample(model, x0, moment, horizon, spec, rng))
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_forward_moment(
    ctx: &Context,
    experiment: &str,
    model: &Model,
    pop_size: usize,
    x0: &PopulationState,
    f: &MomentTestFunction,
    horizon: f64,
    replicas: usize,
) -> Result<Estimate> {
    let side = format!("forward:{pop_size}");
    ctx.estimate(experiment, &side, replicas, |rng| {
        let x = simulate_forward(model, pop_size, x0, horizon, rng)?;
        f.evaluate(&x)
    })
}

/// Exact `E[int f d(X_t)^{x n}]` for a single site without selection, from
/// the linear system of the dual on functions of at most `n` variables.
pub fn neutral_oracle(model: &Model, x0: &[f64], f: &DualFunction, horizon: f64) -> Result<f64> {
    if model.selection != 0.0 {
        return Err(Error::Parameter("the exact oracle needs zero selection".into()));
    }
    if model.site_count() != 1 {
        return Err(Error::Parameter("the exact oracle covers a single site".into()));
    }
    let k = model.k();
    let n = f.arity();
    if n == 0 || f.k() != k || x0.len() != k {
        return Err(Error::Contract("oracle function must have at least one variable over the model's types".into()));
    }
    let offsets: Vec<usize> = (0..=n).scan(0, |acc, a| {
        let start = *acc;
        if a > 0 {
            *acc += k.pow(a as u32);
        }
        Some(start)
    }).collect();
    // offsets[a] is the start of the block of arity a (a >= 1).
    let dim = offsets[n] + k.pow(n as u32);
    if dim > 4096 {
        return Err(Error::Parameter(format!("oracle system of dimension {dim} is too large")));
    }
    let q = model.types.mutation_generator();
    let d = model.resampling;
    let mut op = DMatrix::<f64>::zeros(dim, dim);
    for a in 1..=n {
        let size = k.pow(a as u32);
        for col in 0..size {
            let mut data = vec![0.0; size];
            data[col] = 1.0;
            let basis = DualFunction::new(k, a, data)?;
            let target = offsets[a] + col;
            for var in 0..a {
                let mut g = basis.clone();
                g.apply_matrix(var, &q);
                for (row, v) in g.data().iter().enumerate() {
                    op[(offsets[a] + row, target)] += v;
                }
            }
            if a >= 2 && d > 0.0 {
                op[(target, target)] -= d * (a * (a - 1) / 2) as f64;
                for i in 0..a {
                    for j in i + 1..a {
                        let g = basis.coalesce(i, j)?;
                        for (row, v) in g.data().iter().enumerate() {
                            op[(offsets[a - 1] + row, target)] += d * v;
                        }
                    }
                }
            }
        }
    }
    let mut v0 = DVector::<f64>::zeros(dim);
    for (i, v) in f.data().iter().enumerate() {
        v0[offsets[n] + i] = *v;
    }
    let vt = (op * horizon).exp() * v0;
    let mut total = 0.0;
    for a in 1..=n {
        let size = k.pow(a as u32);
        let block: Vec<f64> = (0..size).map(|i| vt[offsets[a] + i]).collect();
        let measures: Vec<&[f64]> = vec![x0; a];
        total += DualFunction::new(k, a, block)?.integrate(&measures)?;
    }
    Ok(total)
}

/// `E[x_t^2]` for one type of a neutral two-type site: `e^{-dt} x^2 + (1 - e^{-dt}) x`.
pub fn neutral_second_moment(x: f64, resampling: f64, t: f64) -> f64 {
    let decay = (-resampling * t).exp();
    decay * x * x + (1.0 - decay) * x
}

/// Two-sample Kolmogorov-Smirnov statistic and its 1% critical value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let critical = 1.628 * ((n + m) as f64 / (n * m) as f64).sqrt();
    (d, critical)
}

/// Membership frequencies of the set-valued chain dual against `exp(tQ)`:
/// one record per time, start and member.
pub fn markov_chain_experiment(
    ctx: &Context,
    experiment: &str,
    q: &[Vec<f64>],
    times: &[f64],
    replicas: usize,
) -> Result<Vec<CheckRecord>> {
    let k = q.len();
    let mut records = Vec::new();
    for &t in times {
        let p = transition_matrix(q, t);
        for start in 0..k {
            let side = format!("set-dual:t={t}:start={start}");
            let estimates = ctx.estimate_many(experiment, &side, replicas, k, |rng| {
                let set = markov_chain_set_dual(q, start, t, rng)?;
                Ok((0..k).map(|i| if set.contains(i) { 1.0 } else { 0.0 }).collect())
            })?;
            for (i, est) in estimates.into_iter().enumerate() {
                records.push(CheckRecord::comparison(
                    experiment,
                    &format!("t={t} P({i}->{start})"),
                    "set-dual membership",
                    est,
                    "matrix exponential",
                    Estimate::exact(p[i][start]),
                    ctx.threshold,
                ));
            }
        }
    }
    Ok(records)
}

/// Dual estimates for each spec against the exact oracle.
#[allow(clippy::too_many_arguments)]
pub fn ode_oracle_experiment(
    ctx: &Context,
    experiment: &str,
    model: &Model,
    x0: &PopulationState,
    moment: &ProductMoment,
    horizon: f64,
    replicas: usize,
    specs: &[DualSpec],
) -> Result<Vec<CheckRecord>> {
    let f = DualFunction::indicator_product(model.k(), &moment.sets());
    let exact = Estimate::exact(neutral_oracle(model, x0.site(0), &f, horizon)?);
    specs
        .iter()
        .map(|spec| {
            let est = estimate_dual_expectation(ctx, experiment, model, x0, moment, horizon, replicas, spec)?;
            Ok(CheckRecord::comparison(experiment, &spec.label(), &spec.label(), est, "oracle", exact, ctx.threshold))
        })
        .collect()
}

/// Pairwise comparisons between dual kinds on the same moment.
#[allow(clippy::too_many_arguments)]
pub fn cross_dual_experiment(
    ctx: &Context,
    experiment: &str,
    model: &Model,
    x0: &PopulationState,
    moment: &ProductMoment,
    horizon: f64,
    replicas: usize,
    specs: &[DualSpec],
) -> Result<Vec<CheckRecord>> {
    let estimates: Vec<Estimate> = specs
        .iter()
        .map(|s| estimate_dual_expectation(ctx, experiment, model, x0, moment, horizon, replicas, s))
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    for a in 0..specs.len() {
        for b in a + 1..specs.len() {
            records.push(CheckRecord::comparison(
                experiment,
                &format!("{} vs {}", specs[a].label(), specs[b].label()),
                &specs[a].label(),
                estimates[a],
                &specs[b].label(),
                estimates[b],
                ctx.threshold,
            ));
        }
    }
    Ok(records)
}

/// Forward moment against each dual spec.
#[allow(clippy::too_many_arguments)]
pub fn duality_experiment(
    ctx: &Context,
    experiment: &str,
    model: &Model,
    pop_size: usize,
    x0: &PopulationState,
    moment: &ProductMoment,
    horizon: f64,
    forward_replicas: usize,
    dual_replicas: usize,
    specs: &[DualSpec],
) -> Result<Vec<CheckRecord>> {
    let f = moment.to_test_function(model.k());
    let forward = estimate_forward_moment(ctx, experiment, model, pop_size, x0, &f, horizon, forward_replicas)?;
    let forward_label = format!("forward n={pop_size}");
    specs
        .iter()
        .map(|spec| {
            let est = estimate_dual_expectation(ctx, experiment, model, x0, moment, horizon, dual_replicas, spec)?;
            Ok(CheckRecord::comparison(
                experiment,
                &format!("forward vs {}", spec.label()),
                &forward_label,
                forward,
                &spec.label(),
                est,
                ctx.threshold,
            ))
        })
        .collect()
}

/// Second moment of a neutral two-type site from the particle system,
/// judged by relative error against the closed form.
#[allow(clippy::too_many_arguments)]
pub fn neutral_moment_experiment(
    ctx: &Context,
    experiment: &str,
    x: f64,
    resampling: f64,
    pop_size: usize,
    times: &[f64],
    replicas: usize,
    tolerance: f64,
) -> Result<Vec<CheckRecord>> {
    let types = crate::geometry::TypeSpace::new(vec![0.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.0, 0.0, vec![])?;
    let model = Model::new(types, crate::geometry::MigrationKernel::single(), 0.0, resampling)?;
    let x0 = PopulationState::new(vec![vec![x, 1.0 - x]])?;
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let estimates = ctx.estimate_many(experiment, &format!("forward:{pop_size}"), replicas, sorted.len(), |rng| {
        let mut system = MoranSystem::from_state(&x0, pop_size)?;
        let mut now = 0.0;
        let mut out = Vec::with_capacity(sorted.len());
        for &t in &sorted {
            system.run(&model, t - now, rng)?;
            now = t;
            let p = system.to_state().site(0)[0];
            out.push(p * p);
        }
        Ok(out)
    })?;
    Ok(sorted
        .iter()
        .zip(estimates)
        .map(|(&t, est)| {
            let exact = neutral_second_moment(x, resampling, t);
            let rel = (est.mean - exact).abs() / exact;
            let mut r = CheckRecord::statistic(
                experiment,
                &format!("t={t} relative error"),
                est,
                rel,
                tolerance,
                Verdict::from_pass(rel <= tolerance),
            );
            r.rhs_label = "closed form".into();
            r.rhs = Estimate::exact(exact);
            r
        })
        .collect())
}

/// Trap distribution and absorption-time law of the partition chain,
/// unconditioned against the mixture of its h-transforms.
pub fn h_transform_experiment(
    ctx: &Context,
    experiment: &str,
    rates: &[Vec<f64>],
    start: &PartitionChain,
    paths: usize,
) -> Result<Vec<CheckRecord>> {
    let model = PartitionChainModel::new(rates.to_vec(), start.blocks().len())?;
    let s0 = model.encode(start);
    let h = model.absorption_probabilities()?;
    let blocks = start.blocks().len();
    let max_time = 1e9;
    let (plain, _) = ctx.run_replicas(experiment, "unconditioned", paths, |rng| {
        model
            .chain()
            .run_to_absorption(s0, max_time, rng)
            .map(|(s, t)| (model.decode(s).trap(), t))
            .ok_or_else(|| Error::Aborted("no absorption".into()))
    })?;
    let mixture = ConditionedMixture::new(&model, s0)?;
    let (mixed, _) = ctx.run_replicas(experiment, "mixture", paths, |rng| {
        mixture.sample(max_time, rng).ok_or_else(|| Error::Aborted("no absorption".into()))
    })?;
    let mut records = Vec::new();
    for b in 0..blocks {
        let hits: Vec<f64> = plain.iter().map(|(trap, _)| if *trap == Some(b) { 1.0 } else { 0.0 }).collect();
        records.push(CheckRecord::comparison(
            experiment,
            &format!("absorption in block {b}"),
            "simulated",
            Estimate::from_values(&hits, 0, ctx.master_seed),
            "linear system",
            Estimate::exact(h[b][s0]),
            ctx.threshold,
        ));
    }
    for b in 0..blocks {
        if h[b][s0] <= 0.0 {
            continue;
        }
        let chain = model.h_transform(s0, b, &h)?;
        let (ends, _) = ctx.run_replicas(experiment, &format!("conditioned:{b}"), paths.min(10_000), |rng| {
            let (s, _) = chain.run_to_absorption(s0, max_time, rng).ok_or_else(|| Error::Aborted("no absorption".into()))?;
            Ok(if model.decode(s).trap() == Some(b) { 1.0 } else { 0.0 })
        })?;
        let est = Estimate::from_values(&ends, 0, ctx.master_seed);
        records.push(CheckRecord::statistic(
            experiment,
            &format!("conditioned on block {b} hits it"),
            est,
            est.mean,
            1.0,
            Verdict::from_pass(est.mean == 1.0),
        ));
    }
    let a: Vec<f64> = plain.iter().map(|p| p.1).collect();
    let b: Vec<f64> = mixed.iter().map(|p| p.1).collect();
    let (d, critical) = ks_two_sample(&a, &b);
    let mut ks = CheckRecord::statistic(
        experiment,
        "absorption time: mixture vs unconditioned (KS 1%)",
        Estimate::from_values(&b, 0, ctx.master_seed),
        d,
        critical,
        Verdict::from_pass(d <= critical),
    );
    ks.lhs_label = "mixture".into();
    ks.rhs_label = "unconditioned".into();
    ks.rhs = Estimate::from_values(&a, 0, ctx.master_seed);
    records.push(ks);
    Ok(records)
}

/// Setup of the ergodic experiment.
#[derive(Clone, Debug)]
pub struct ErgodicSetup {
    pub pop_size: usize,
    pub initial: [PopulationState; 2],
    pub moments: Vec<ProductMoment>,
    pub times: Vec<f64>,
    pub replicas: usize,
    /// Horizon and replicas of the set-valued dual trapping check.
    pub trap_horizon: f64,
    pub trap_replicas: usize,
    pub trap_threshold: f64,
}

fn require_positive_mutation(model: &Model) -> Result<()> {
    let k = model.k();
    for i in 0..k {
        for j in 0..k {
            if i != j && model.types.pair_rate(i, j) <= 0.0 {
                return Err(Error::Parameter(format!(
                    "the ergodic theorem needs every mutation rate m*M(i,j) > 0 for i != j; M({i},{j}) gives 0"
                )));
            }
        }
    }
    Ok(())
}

/// Moments from two initial states along a time grid, and the trapping of
/// the set-valued dual.
pub fn ergodic_experiment(ctx: &Context, experiment: &str, model: &Model, setup: &ErgodicSetup) -> Result<Vec<CheckRecord>> {
    require_positive_mutation(model)?;
    let mut times = setup.times.clone();
    times.sort_by(f64::total_cmp);
    let last = *times.last().ok_or_else(|| Error::Parameter("empty time grid".into()))?;
    let dims = times.len() * setup.moments.len();
    let mut sides = Vec::new();
    for (which, x0) in setup.initial.iter().enumerate() {
        let est = ctx.estimate_many(experiment, &format!("forward:{which}"), setup.replicas, dims, |rng| {
            let mut system = MoranSystem::from_state(x0, setup.pop_size)?;
            let mut now = 0.0;
            let mut out = Vec::with_capacity(dims);
            for &t in &times {
                system.run(model, t - now, rng)?;
                now = t;
                let x = system.to_state();
                out.extend(setup.moments.iter().map(|m| m.evaluate(&x)));
            }
            Ok(out)
        })?;
        sides.push(est);
    }
    let mut records = Vec::new();
    for (ti, &t) in times.iter().enumerate() {
        for (mi, m) in setup.moments.iter().enumerate() {
            let idx = ti * setup.moments.len() + mi;
            let mut r = CheckRecord::comparison(
                experiment,
                &format!("t={t} moment {}", describe_moment(m, model.k())),
                "initial A",
                sides[0][idx],
                "initial B",
                sides[1][idx],
                ctx.threshold,
            );
            if t != last {
                r.verdict = Verdict::Info;
            }
            records.push(r);
        }
    }
    let first = &setup.moments[0];
    let factors: Vec<(Location, TypeSet)> = site_locations(first).into_iter().zip(first.sets()).collect();
    let g0 = Tableau::product(model.k(), &factors)?;
    let options = SetDualOptions { stop_at_trap: true, ..SetDualOptions::default() };
    let trap = ctx.estimate_many(experiment, "set-dual-trapping", setup.trap_replicas, 3, |rng| {
        let run = simulate_set_dual(&g0, model, setup.trap_horizon, rng, &options)?;
        Ok(match run.trap {
            Some((_, true)) => vec![1.0, 0.0, 1.0],
            Some((_, false)) => vec![1.0, 1.0, 0.0],
            None => vec![0.0, 0.0, 0.0],
        })
    })?;
    records.push(CheckRecord::statistic(
        experiment,
        &format!("set-dual trapped by t={}", setup.trap_horizon),
        trap[0],
        trap[0].mean,
        setup.trap_threshold,
        Verdict::from_pass(trap[0].mean >= setup.trap_threshold),
    ));
    for (label, est) in [("trap value 0 frequency", trap[1]), ("trap value 1 frequency", trap[2])] {
        records.push(CheckRecord::statistic(experiment, label, est, est.mean, 0.0, Verdict::Info));
    }
    Ok(records)
}

/// Text form `x_site(bits)` of a product moment, sites from 0.
pub fn describe_moment(m: &ProductMoment, k: usize) -> String {
    m.factors.iter().map(|(s, b)| format!("x{s}({})", b.notation(k))).collect::<Vec<_>>().join("*")
}

/// Collision frequency of two set-valued clouds started at hierarchical
/// distance `0..=max_distance`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecouplingLevel {
    pub distance: usize,
    pub collision: Estimate,
    pub trapping_rate: f64,
    pub bound: f64,
}

pub fn decoupling_levels(
    ctx: &Context,
    experiment: &str,
    model: &Model,
    set: TypeSet,
    horizon: f64,
    replicas: usize,
) -> Result<Vec<DecouplingLevel>> {
    let (n, depth, level_rates) = match model.kernel.geography() {
        Geography::Hierarchical { n, depth, level_rates } => (*n, *depth, level_rates.clone()),
        _ => return Err(Error::Parameter("the decoupling check needs a hierarchical geography".into())),
    };
    let origin = model.kernel.site(&HierarchicalAddress::origin(n as u32)?)?;
    let options = SetDualOptions { stop_at_trap: true, ..SetDualOptions::default() };
    let mut out = Vec::new();
    for distance in 0..=depth {
        let other = if distance == 0 {
            origin
        } else {
            let mut digits = vec![0; distance];
            digits[distance - 1] = 1;
            model.kernel.site(&HierarchicalAddress::new(n as u32, digits)?)?
        };
        let columns = vec![
            Column { location: Location::Site(origin), cloud: 1 },
            Column { location: Location::Site(other), cloud: 2 },
        ];
        let g0 = Tableau::new(model.k(), columns, vec![vec![set, set]])?;
        let samples = ctx.estimate_many(experiment, &format!("clouds:{distance}"), replicas, 3, |rng| {
            let run = simulate_set_dual(&g0, model, horizon, rng, &options)?;
            let end = run.trap.map_or(horizon, |t| t.0);
            let collided = run.collision.is_some_and(|c| c <= end);
            Ok(vec![if collided { 1.0 } else { 0.0 }, if run.trap.is_some() { 1.0 } else { 0.0 }, end])
        })?;
        let exposure = samples[2].mean;
        let trapping_rate = if exposure > 0.0 { samples[1].mean / exposure } else { f64::INFINITY };
        let bound = if distance == 0 {
            1.0
        } else {
            let c = level_rates.get(distance).copied().unwrap_or(0.0) / (n as f64).powi(2 * distance as i32);
            c / (trapping_rate + c)
        };
        out.push(DecouplingLevel { distance, collision: samples[0], trapping_rate, bound });
    }
    Ok(out)
}

/// Records for the decoupling check: one per distance, monotonicity, and
/// the frequency at the largest distance below `far_limit`.
pub fn decoupling_experiment(
    ctx: &Context,
    experiment: &str,
    model: &Model,
    set: TypeSet,
    horizon: f64,
    replicas: usize,
    far_limit: f64,
) -> Result<Vec<CheckRecord>> {
    let levels = decoupling_levels(ctx, experiment, model, set, horizon, replicas)?;
    let mut records: Vec<CheckRecord> = levels
        .iter()
        .map(|l| {
            let mut r = CheckRecord::statistic(
                experiment,
                &format!("collision frequency at distance {}", l.distance),
                l.collision,
                l.collision.mean,
                l.bound,
                Verdict::Info,
            );
            r.rhs_label = format!("rate bound (fitted trapping rate {:.4})", l.trapping_rate);
            r
        })
        .collect();
    let worst_increase =
        levels.windows(2).map(|w| w[1].collision.mean - w[0].collision.mean).fold(f64::NEG_INFINITY, f64::max);
    let far = levels.last().expect("at least one level").collision;
    records.push(CheckRecord::statistic(
        experiment,
        "collision frequency non-increasing in distance",
        far,
        worst_increase,
        0.0,
        Verdict::from_pass(worst_increase <= 0.0),
    ));
    records.push(CheckRecord::statistic(
        experiment,
        "collision frequency at largest distance",
        far,
        far.mean,
        far_limit,
        Verdict::from_pass(far.mean < far_limit),
    ));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{MigrationKernel, TypeSpace};

    #[test]
    fn welford_merge_matches_direct() {
        let values: Vec<f64> = (0..3000).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let e = Estimate::from_values(&values, 0, 1);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        assert!((e.mean - mean).abs() < 1e-12);
        assert!((e.std_error - (var / values.len() as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn seeds_separate_streams() {
        use rand::Rng;
        let a: u64 = replica_rng(1, "x", "lhs", 0).random();
        let b: u64 = replica_rng(1, "x", "rhs", 0).random();
        let c: u64 = replica_rng(1, "x", "lhs", 1).random();
        let d: u64 = replica_rng(1, "x", "lhs", 0).random();
        assert!(a != b && a != c);
        assert_eq!(a, d);
    }

    #[test]
    fn z_of_exact_values() {
        assert_eq!(z_score(&Estimate::exact(1.0), &Estimate::exact(1.0)), 0.0);
        assert!(z_score(&Estimate::exact(1.0), &Estimate::exact(2.0)).is_infinite());
    }

    #[test]
    fn oracle_pure_resampling() {
        let types = TypeSpace::new(vec![0.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.0, 0.0, vec![]).unwrap();
        let model = Model::new(types, MigrationKernel::single(), 0.0, 1.0).unwrap();
        let j = TypeSet::singleton(0);
        let f = DualFunction::indicator_product(2, &[j, j]);
        let got = neutral_oracle(&model, &[0.3, 0.7], &f, 0.8).unwrap();
        assert!((got - neutral_second_moment(0.3, 1.0, 0.8)).abs() < 1e-12);
    }

    #[test]
    fn oracle_pure_mutation() {
        let types =
            TypeSpace::new(vec![0.0, 1.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]], 1.0, 0.0, vec![]).unwrap();
        let model = Model::new(types, MigrationKernel::single(), 0.0, 0.0).unwrap();
        let f = DualFunction::indicator_product(2, &[TypeSet::singleton(0)]);
        let got = neutral_oracle(&model, &[1.0, 0.0], &f, 0.5).unwrap();
        assert!((got - (1.0 + (-1.0f64).exp()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ks_identical_samples() {
        let a: Vec<f64> = (0..500).map(|i| i as f64).collect();
        let (d, crit) = ks_two_sample(&a, &a);
        assert_eq!(d, 0.0);
        assert!(crit > 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 1000.0).collect();
        assert_eq!(ks_two_sample(&a, &b).0, 1.0);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in DualKind::ALL {
            assert_eq!(DualKind::parse(k.name()), Some(k));
        }
    }
}
