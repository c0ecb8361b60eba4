//! Refined duals on finite sums of products of subset indicators, the
//! set-valued mutation jumps they are built from, and the set-valued dual of
//! a finite Markov chain.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::geometry::{TypeSet, TypeSpace};
use crate::markov::transition_matrix;
use crate::model::{Model, PopulationState};
use crate::particle::{simulate_eta, DualParticleState, EtaDynamics, EventKind, Location};

/// Birth rule of a refined dual.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefinedVariant {
    /// `f -> 1_A(u_j) f x 1 + f x 1_{A^c}(u_new)`.
    Psi,
    /// `f -> 1_A(u_j) f x 1 + 1_{A^c}(u_j) f(u_j <- u_new)`.
    PsiHat,
}

/// `sum_rows prod_l 1_{B_l}(u_l)`; every row holds one set per variable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndicatorSum {
    k: usize,
    arity: usize,
    rows: Vec<Vec<TypeSet>>,
}

impl IndicatorSum {
    pub fn new(k: usize, arity: usize, rows: Vec<Vec<TypeSet>>) -> Result<Self> {
        let full = TypeSet::full(k);
        for row in &rows {
            if row.len() != arity {
                return Err(Error::Contract(format!("row with {} factors in a sum of arity {arity}", row.len())));
            }
            if row.iter().any(|b| b.intersection(full) != *b) {
                return Err(Error::Contract(format!("factor outside the {k} types")));
            }
        }
        let mut sum = Self { k, arity, rows };
        sum.drop_zero_rows();
        Ok(sum)
    }

    pub fn product(k: usize, sets: &[TypeSet]) -> Result<Self> {
        Self::new(k, sets.len(), vec![sets.to_vec()])
    }

    /// The constant function 1.
    pub fn one(k: usize, arity: usize) -> Self {
        Self { k, arity, rows: vec![vec![TypeSet::full(k); arity]] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn rows(&self) -> &[Vec<TypeSet>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn drop_zero_rows(&mut self) {
        self.rows.retain(|r| r.iter().all(|b| !b.is_empty()));
    }

    fn check_variable(&self, var: usize) -> Result<()> {
        if var >= self.arity {
            return Err(Error::Contract(format!("variable {var} outside arity {}", self.arity)));
        }
        Ok(())
    }

    /// Birth at variable `var` with level set `level`; adds variable `arity`.
    pub fn select(&mut self, var: usize, level: TypeSet, variant: RefinedVariant) -> Result<()> {
        self.check_variable(var)?;
        let full = TypeSet::full(self.k);
        if level.is_empty() || level.intersection(full) != level {
            return Err(Error::Contract("level set must be a nonempty subset of the types".into()));
        }
        let complement = level.complement(self.k);
        let mut rows = Vec::with_capacity(self.rows.len() * 2);
        for row in &self.rows {
            let e = row[var];
            let mut kept = row.clone();
            kept[var] = e.intersection(level);
            kept.push(full);
            let mut other = row.clone();
            match variant {
                RefinedVariant::Psi => other.push(complement),
                RefinedVariant::PsiHat => {
                    if e.is_full(self.k) {
                        rows.push(row.iter().copied().chain([full]).collect());
                        continue;
                    }
                    other[var] = complement;
                    other.push(e);
                }
            }
            rows.push(kept);
            rows.push(other);
        }
        self.rows = rows;
        self.arity += 1;
        self.drop_zero_rows();
        Ok(())
    }

    /// Set-valued mutation jump for the mutation `from -> to` at `var`,
    /// applied in every row.
    pub fn mutation_jump(&mut self, var: usize, from: usize, to: usize) -> Result<()> {
        self.check_variable(var)?;
        for row in &mut self.rows {
            row[var] = row[var].mutation_preimage(from, to);
        }
        self.drop_zero_rows();
        Ok(())
    }

    /// Identifies variable `j` with `i` (`i < j`).
    pub fn coalesce(&mut self, i: usize, j: usize) -> Result<()> {
        if i >= j || j >= self.arity {
            return Err(Error::Contract(format!("coalescence needs i < j < arity, got ({i}, {j})")));
        }
        for row in &mut self.rows {
            let b = row.remove(j);
            row[i] = row[i].intersection(b);
        }
        self.arity -= 1;
        self.drop_zero_rows();
        Ok(())
    }

    /// `sum_rows prod_l mu_l(B_l)`.
    pub fn evaluate(&self, measures: &[&[f64]]) -> Result<f64> {
        if measures.len() != self.arity {
            return Err(Error::Contract(format!(
                "{} measures for a sum of arity {}",
                measures.len(),
                self.arity
            )));
        }
        Ok(self.rows.iter().map(|r| r.iter().zip(measures).map(|(b, mu)| b.mass(mu)).product::<f64>()).sum())
    }

    /// Evaluates against `X` with one location per variable.
    pub fn evaluate_at(&self, x: &PopulationState, locations: &[Location], rho: &[f64]) -> Result<f64> {
        let measures: Vec<&[f64]> = locations
            .iter()
            .map(|l| match l {
                Location::Site(s) => x.site(*s),
                Location::Star => rho,
            })
            .collect();
        self.evaluate(&measures)
    }

    /// True when no two rows share a point of the product space.
    pub fn rows_disjoint(&self) -> bool {
        rows_disjoint(&self.rows)
    }
}

pub(crate) fn rows_disjoint(rows: &[Vec<TypeSet>]) -> bool {
    rows.iter().enumerate().all(|(a, r)| {
        rows[a + 1..].iter().all(|s| r.iter().zip(s).any(|(x, y)| x.is_disjoint(*y)))
    })
}

impl fmt::Display for IndicatorSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, row) in self.rows.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            let cells: Vec<String> = row.iter().map(|b| format!("({})", b.notation(self.k))).collect();
            write!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Off-diagonal rates of the set-valued mutation jumps.
#[derive(Clone, Debug, PartialEq)]
pub struct SetJumpTable {
    pairs: Vec<(usize, usize, f64)>,
    total: f64,
}

impl SetJumpTable {
    /// Jumps of the mutation semigroup; with `star`, the residual after the
    /// state-independent part is removed.
    pub fn from_types(types: &TypeSpace, star: bool) -> Self {
        let generator = if star && types.star_rate() > 0.0 {
            types.residual_generator()
        } else {
            types.mutation_generator()
        };
        Self::from_rates(&generator)
    }

    /// Jumps of an arbitrary rate matrix.
    pub fn from_generator(q: &[Vec<f64>]) -> Result<Self> {
        let k = q.len();
        for (i, row) in q.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Validation("rate matrix must be square".into()));
            }
            if row.iter().enumerate().any(|(j, v)| !v.is_finite() || (i != j && *v < 0.0)) {
                return Err(Error::Validation(format!("row {i} has a negative or non-finite rate")));
            }
            if row.iter().sum::<f64>().abs() > 1e-9 * (1.0 + row[i].abs()) {
                return Err(Error::Validation(format!("row {i} of the rate matrix does not sum to zero")));
            }
        }
        Ok(Self::from_rates(q))
    }

    fn from_rates(q: &[Vec<f64>]) -> Self {
        let pairs: Vec<(usize, usize, f64)> = (0..q.len())
            .flat_map(|i| (0..q.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && q[i][j] > 0.0)
            .map(|(i, j)| (i, j, q[i][j]))
            .collect();
        let total = pairs.iter().map(|p| p.2).sum();
        Self { pairs, total }
    }

    /// Total jump rate per variable.
    pub fn total(&self) -> f64 {
        self.total
    }

    /// Samples a pair `(from, to)` proportionally to its rate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let mut u = rng.random::<f64>() * self.total;
        for &(i, j, r) in &self.pairs {
            if u < r {
                return (i, j);
            }
            u -= r;
        }
        let last = self.pairs.last().expect("sampling from an empty jump table");
        (last.0, last.1)
    }
}

/// Evolves `{start}` under the set-valued jumps of `q` up to `horizon`.
/// `i` belongs to the result with probability `P_i(Z_t = start)`.
pub fn markov_chain_set_dual<R: Rng + ?Sized>(
    q: &[Vec<f64>],
    start: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<TypeSet> {
    if start >= q.len() {
        return Err(Error::Parameter(format!("start type {start} outside {} states", q.len())));
    }
    let table = SetJumpTable::from_generator(q)?;
    let mut set = TypeSet::singleton(start);
    evolve_set(&mut set, &table, horizon, rng);
    Ok(set)
}

fn evolve_set<R: Rng + ?Sized>(set: &mut TypeSet, table: &SetJumpTable, horizon: f64, rng: &mut R) {
    if table.total() <= 0.0 || horizon <= 0.0 {
        return;
    }
    let clock = Exp::new(table.total()).expect("positive rate");
    let mut t = clock.sample(rng);
    while t <= horizon {
        let (from, to) = table.sample(rng);
        *set = set.mutation_preimage(from, to);
        t += clock.sample(rng);
    }
}

/// Entry of a mutation-semigroup comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct SemigroupEntry {
    pub point: Vec<usize>,
    pub exact: f64,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemigroupCheck {
    pub entries: Vec<SemigroupEntry>,
    pub max_z: f64,
    pub passed: bool,
}

/// Compares `E[prod_l 1_{B_l(t)}(u_l)]` under independent set jumps against
/// `prod_l (P_t 1_{B_l})(u_l)` at every point `u`.
pub fn mutation_dual_semigroup_check<R: Rng + ?Sized>(
    types: &TypeSpace,
    sets: &[TypeSet],
    horizon: f64,
    replicas: usize,
    threshold: f64,
    rng: &mut R,
) -> Result<SemigroupCheck> {
    let k = types.k();
    if sets.is_empty() || replicas < 2 {
        return Err(Error::Parameter("need at least one set and two replicas".into()));
    }
    let p = transition_matrix(&types.mutation_generator(), horizon);
    let table = SetJumpTable::from_types(types, false);
    let points = k.pow(sets.len() as u32);
    let mut sums = vec![0.0; points];
    let mut squares = vec![0.0; points];
    let mut evolved = sets.to_vec();
    let mut u = vec![0; sets.len()];
    for _ in 0..replicas {
        evolved.copy_from_slice(sets);
        for b in &mut evolved {
            evolve_set(b, &table, horizon, rng);
        }
        for idx in 0..points {
            decode_point(idx, k, &mut u);
            let v = if u.iter().zip(&evolved).all(|(t, b)| b.contains(*t)) { 1.0 } else { 0.0 };
            sums[idx] += v;
            squares[idx] += v * v;
        }
    }
    let n = replicas as f64;
    let mut entries = Vec::with_capacity(points);
    let mut max_z: f64 = 0.0;
    for idx in 0..points {
        decode_point(idx, k, &mut u);
        let exact: f64 = u.iter().zip(sets).map(|(t, b)| b.types().map(|j| p[*t][j]).sum::<f64>()).product();
        let mean = sums[idx] / n;
        let var = ((squares[idx] - n * mean * mean) / (n - 1.0)).max(0.0);
        let std_error = (var / n).sqrt();
        let diff = (mean - exact).abs();
        let z = if std_error > 0.0 {
            diff / std_error
        } else if diff < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        max_z = max_z.max(z);
        entries.push(SemigroupEntry { point: u.clone(), exact, mean, std_error });
    }
    Ok(SemigroupCheck { entries, max_z, passed: max_z <= threshold })
}

fn decode_point(mut idx: usize, k: usize, u: &mut [usize]) {
    for slot in u.iter_mut().rev() {
        *slot = idx % k;
        idx /= k;
    }
}

/// A dual whose variables follow the labels of the particle process.
pub trait IndicatorDual {
    /// Birth at `parent` with sampled level set; the child takes the next label.
    fn birth(&mut self, parent: usize, level: TypeSet) -> Result<()>;
    /// Label `absorbed` merges into `survivor`.
    fn coalesce(&mut self, survivor: usize, absorbed: usize) -> Result<()>;
    fn mutation_jump(&mut self, label: usize, from: usize, to: usize) -> Result<()>;
    fn relocate(&mut self, label: usize, to: Location) -> Result<()>;
}

/// Refined dual state: an indicator sum with its birth rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefinedDual {
    pub sum: IndicatorSum,
    pub variant: RefinedVariant,
}

impl IndicatorDual for RefinedDual {
    fn birth(&mut self, parent: usize, level: TypeSet) -> Result<()> {
        self.sum.select(parent, level, self.variant)
    }

    fn coalesce(&mut self, survivor: usize, absorbed: usize) -> Result<()> {
        self.sum.coalesce(survivor, absorbed)
    }

    fn mutation_jump(&mut self, label: usize, from: usize, to: usize) -> Result<()> {
        self.sum.mutation_jump(label, from, to)
    }

    fn relocate(&mut self, _label: usize, _to: Location) -> Result<()> {
        Ok(())
    }
}

/// Summary of one driven replica.
#[derive(Clone, Debug)]
pub struct DrivenRun {
    pub eta: DualParticleState,
    pub births: u32,
    pub mutation_jumps: u64,
}

/// Simulates the particle process to `horizon` and replays its events into
/// `dual`, with set-valued mutation jumps on every non-star label in between.
/// `observe` runs after every transition.
///
/// Random draws depend only on the particle path, so two duals driven from
/// the same generator state see identical events.
pub fn drive_indicator_dual<D: IndicatorDual, R: Rng + ?Sized>(
    dual: &mut D,
    eta0: &DualParticleState,
    model: &Model,
    star: bool,
    horizon: f64,
    rng: &mut R,
    mut observe: impl FnMut(&D) -> Result<()>,
) -> Result<DrivenRun> {
    let star = star && model.types.star_rate() > 0.0;
    let dynamics = EtaDynamics::from_model(model, star);
    let (eta, log) = simulate_eta(eta0, &dynamics, horizon, rng);
    let table = SetJumpTable::from_types(&model.types, star);
    let level_sets = model.decomposition().level_sets();
    let mut frozen: Vec<bool> = eta0.locations().iter().map(|l| *l == Location::Star).collect();
    let mut now = 0.0;
    let mut births = 0;
    let mut jumps = 0u64;

    for ev in &log {
        jumps += set_jumps(dual, &frozen, &table, now, ev.time, rng, &mut observe)?;
        now = ev.time;
        match ev.kind {
            EventKind::Coalescence { survivor, absorbed } => {
                dual.coalesce(survivor, absorbed)?;
                frozen.remove(absorbed);
            }
            EventKind::Birth { parent, .. } => {
                let level = level_sets[model.decomposition().sample_level(rng)];
                dual.birth(parent, level)?;
                frozen.push(false);
                births += 1;
            }
            EventKind::Migration { element, to, .. } => dual.relocate(element, Location::Site(to))?,
            EventKind::StarJump { element } => {
                frozen[element] = true;
                dual.relocate(element, Location::Star)?;
            }
        }
        observe(dual)?;
    }
    jumps += set_jumps(dual, &frozen, &table, now, horizon, rng, &mut observe)?;
    Ok(DrivenRun { eta, births, mutation_jumps: jumps })
}

fn set_jumps<D: IndicatorDual, R: Rng + ?Sized>(
    dual: &mut D,
    frozen: &[bool],
    table: &SetJumpTable,
    from_time: f64,
    to_time: f64,
    rng: &mut R,
    observe: &mut impl FnMut(&D) -> Result<()>,
) -> Result<u64> {
    let live: Vec<usize> = (0..frozen.len()).filter(|&l| !frozen[l]).collect();
    if table.total() <= 0.0 || live.is_empty() || to_time <= from_time {
        return Ok(0);
    }
    let clock = Exp::new(table.total() * live.len() as f64).expect("positive rate");
    let mut count = 0;
    let mut t = from_time + clock.sample(rng);
    while t < to_time {
        let label = live[rng.random_range(0..live.len())];
        let (i, j) = table.sample(rng);
        dual.mutation_jump(label, i, j)?;
        count += 1;
        observe(dual)?;
        t += clock.sample(rng);
    }
    Ok(count)
}

/// Outcome of one refined-dual replica.
#[derive(Clone, Debug)]
pub struct RefinedRun {
    pub eta: DualParticleState,
    pub sum: IndicatorSum,
    pub births: u32,
}

impl RefinedRun {
    pub fn value(&self, x: &PopulationState, rho: &[f64]) -> Result<f64> {
        self.sum.evaluate_at(x, &self.eta.locations(), rho)
    }
}

/// Runs the refined dual from `(eta0, f0)`. Structural checks run after
/// every transition: arity follows the particle count, the summand count
/// stays within `2^births`, and coupled states keep disjoint rows.
pub fn run_refined_dual<R: Rng + ?Sized>(
    eta0: &DualParticleState,
    f0: &IndicatorSum,
    model: &Model,
    horizon: f64,
    rng: &mut R,
    variant: RefinedVariant,
    star: bool,
) -> Result<RefinedRun> {
    if f0.arity() != eta0.len() || f0.k() != model.k() {
        return Err(Error::Contract("initial indicator sum does not match the particle state or types".into()));
    }
    if star && model.types.star_rate() <= 0.0 {
        return Err(Error::Parameter("the star extension needs a positive state-independent rate".into()));
    }
    let initial_rows = f0.len().max(1);
    let initially_disjoint = f0.rows_disjoint();
    let mut dual = RefinedDual { sum: f0.clone(), variant };
    let run = drive_indicator_dual(&mut dual, eta0, model, star, horizon, rng, |d| {
        if variant == RefinedVariant::PsiHat && initially_disjoint && !d.sum.rows_disjoint() {
            return Err(Error::Contract("coupled rows lost disjointness".into()));
        }
        Ok(())
    })?;
    if dual.sum.len() > initial_rows << run.births.min(60) {
        return Err(Error::Contract(format!("{} summands after {} births", dual.sum.len(), run.births)));
    }
    if dual.sum.arity() != run.eta.len() {
        return Err(Error::Contract("arity out of step with the particle process".into()));
    }
    Ok(RefinedRun { eta: run.eta, sum: dual.sum, births: run.births })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(s: &str) -> TypeSet {
        TypeSet::parse(s).unwrap()
    }

    fn rows(sum: &IndicatorSum) -> Vec<String> {
        sum.to_string().lines().map(str::to_string).collect()
    }

    #[test]
    fn psi_two_types() {
        let mut f = IndicatorSum::product(2, &[set("01")]).unwrap();
        f.select(0, set("01"), RefinedVariant::Psi).unwrap();
        assert_eq!(rows(&f), ["(01) (11)", "(01) (10)"]);
    }

    #[test]
    fn psi_hat_two_types() {
        let mut f = IndicatorSum::product(2, &[set("01")]).unwrap();
        f.select(0, set("01"), RefinedVariant::PsiHat).unwrap();
        assert_eq!(rows(&f), ["(01) (11)", "(10) (01)"]);
    }

    #[test]
    fn zero_summand_not_doubled() {
        let mut f = IndicatorSum::product(2, &[set("10")]).unwrap();
        f.select(0, set("01"), RefinedVariant::PsiHat).unwrap();
        assert_eq!(rows(&f), ["(10) (10)"]);
    }

    #[test]
    fn three_selections_give_staircase() {
        let mut f = IndicatorSum::product(3, &[set("110")]).unwrap();
        for _ in 0..3 {
            f.select(0, set("011"), RefinedVariant::PsiHat).unwrap();
        }
        assert_eq!(f.len(), 4);
        assert!(f.rows_disjoint());
    }

    #[test]
    fn mutation_jump_examples() {
        let mut f = IndicatorSum::new(2, 1, vec![vec![set("01")], vec![set("10")]]).unwrap();
        f.mutation_jump(0, 0, 1).unwrap();
        assert_eq!(rows(&f), ["(11)"]);
        let mut g = IndicatorSum::new(3, 1, vec![vec![set("111")]]).unwrap();
        g.mutation_jump(0, 1, 0).unwrap();
        assert_eq!(rows(&g), ["(111)"]);
    }

    #[test]
    fn coalescence_removes_empty_intersections() {
        let mut f = IndicatorSum::new(2, 2, vec![vec![set("10"), set("01")], vec![set("11"), set("01")]]).unwrap();
        f.coalesce(0, 1).unwrap();
        assert_eq!(rows(&f), ["(01)"]);
        assert!(f.coalesce(0, 1).is_err());
    }

    #[test]
    fn two_state_chain_identity() {
        let q = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let hits = (0..n).filter(|_| markov_chain_set_dual(&q, 0, 1.0, &mut rng).unwrap().contains(0)).count();
        let p = hits as f64 / n as f64;
        let exact = (1.0 + (-2.0f64).exp()) / 2.0;
        assert!((p - exact).abs() < 4.0 * (exact * (1.0 - exact) / n as f64).sqrt());
    }

    #[test]
    fn zero_chain_stays() {
        let q = vec![vec![0.0; 3]; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(markov_chain_set_dual(&q, 2, 5.0, &mut rng).unwrap(), TypeSet::singleton(2));
        assert!(markov_chain_set_dual(&[vec![-1.0, 2.0], vec![0.0, 0.0]], 0, 1.0, &mut rng).is_err());
    }
}
