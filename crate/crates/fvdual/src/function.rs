//! Function-valued duals on dense tensors over `I^m`.
//!
//! Variables are numbered by the labels of the driving particle process, so
//! variable `l` belongs to partition element `l`.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::geometry::TypeSet;
use crate::markov::transition_matrix;
use crate::model::{Model, PopulationState};
use crate::particle::{simulate_eta, DualParticleState, EtaDynamics, EventKind, Location};

/// Default cap on tensor entries; a replica exceeding it is aborted.
pub const DEFAULT_MAX_ENTRIES: usize = 1 << 22;

/// A bounded function of `arity` type variables, stored densely.
///
/// Entry `u` sits at `sum_l u_l K^(arity-1-l)`, so a new last variable
/// refines every old entry into `K` consecutive ones.
#[derive(Clone, Debug, PartialEq)]
pub struct DualFunction {
    k: usize,
    arity: usize,
    data: Vec<f64>,
}

impl DualFunction {
    pub fn new(k: usize, arity: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k.pow(arity as u32) {
            return Err(Error::Contract(format!("tensor of length {} is not {k}^{arity}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("tensor entries must be finite".into()));
        }
        Ok(Self { k, arity, data })
    }

    pub fn constant(k: usize, arity: usize, value: f64) -> Self {
        Self { k, arity, data: vec![value; k.pow(arity as u32)] }
    }

    pub fn from_fn(k: usize, arity: usize, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut u = vec![0; arity];
        let data = (0..k.pow(arity as u32))
            .map(|idx| {
                decode(idx, k, &mut u);
                f(&u)
            })
            .collect();
        Self { k, arity, data }
    }

    /// `prod_l 1_{B_l}(u_l)`.
    pub fn indicator_product(k: usize, sets: &[TypeSet]) -> Self {
        Self::from_fn(k, sets.len(), |u| if u.iter().zip(sets).all(|(t, b)| b.contains(*t)) { 1.0 } else { 0.0 })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, u: &[usize]) -> f64 {
        self.data[u.iter().fold(0, |acc, &t| acc * self.k + t)]
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    fn stride(&self, var: usize) -> usize {
        self.k.pow((self.arity - 1 - var) as u32)
    }

    fn digit(&self, idx: usize, var: usize) -> usize {
        idx / self.stride(var) % self.k
    }

    /// Identifies variable `j` with variable `i` (`i < j`) and drops `j`.
    pub fn coalesce(&self, i: usize, j: usize) -> Result<Self> {
        if i >= j || j >= self.arity {
            return Err(Error::Contract(format!("coalescence needs i < j < arity, got ({i}, {j})")));
        }
        let k = self.k;
        let arity = self.arity - 1;
        let mut w = vec![0; arity];
        let mut u = vec![0; self.arity];
        let data = (0..k.pow(arity as u32))
            .map(|idx| {
                decode(idx, k, &mut w);
                u[..j].copy_from_slice(&w[..j]);
                u[j] = w[i];
                u[j + 1..].copy_from_slice(&w[j..]);
                self.get(&u)
            })
            .collect();
        Ok(Self { k, arity, data })
    }

    /// Appends variable `m+1` with `g' = h(u_i, u_{m+1}, g(u))`.
    fn extend(&self, i: usize, h: impl Fn(usize, usize, usize) -> f64) -> Self {
        let k = self.k;
        let mut data = Vec::with_capacity(self.data.len() * k);
        for idx in 0..self.data.len() {
            let ui = self.digit(idx, i);
            for w in 0..k {
                data.push(h(ui, w, idx));
            }
        }
        Self { k, arity: self.arity + 1, data }
    }

    /// Signed selection: `(chi(u_i) - chi(u_{m+1})) g`.
    pub fn select_signed(&self, i: usize, chi: &[f64]) -> Result<Self> {
        self.check_variable(i)?;
        Ok(self.extend(i, |ui, w, idx| (chi[ui] - chi[w]) * self.data[idx]))
    }

    /// Non-negative selection: `(chi(u_i) + 1 - chi(u_{m+1})) g`.
    pub fn select_plus(&self, i: usize, chi: &[f64]) -> Result<Self> {
        self.check_variable(i)?;
        check_fitness(chi)?;
        Ok(self.extend(i, |ui, w, idx| (chi[ui] + 1.0 - chi[w]) * self.data[idx]))
    }

    /// Coupled selection: `chi(u_i) g(u) + (1 - chi(u_i)) g(u; u_i <- u_{m+1})`.
    pub fn select_gplus(&self, i: usize, chi: &[f64]) -> Result<Self> {
        self.check_variable(i)?;
        check_fitness(chi)?;
        let stride = self.stride(i);
        Ok(self.extend(i, |ui, w, idx| {
            let moved = idx - ui * stride + w * stride;
            chi[ui] * self.data[idx] + (1.0 - chi[ui]) * self.data[moved]
        }))
    }

    fn check_variable(&self, i: usize) -> Result<()> {
        if i >= self.arity {
            return Err(Error::Contract(format!("variable {i} outside arity {}", self.arity)));
        }
        Ok(())
    }

    /// `g(u) <- sum_v P(u_var, v) g(u; u_var <- v)`.
    pub fn apply_matrix(&mut self, var: usize, p: &[Vec<f64>]) {
        let k = self.k;
        let stride = self.stride(var);
        let block = stride * k;
        let mut column = vec![0.0; k];
        for outer in (0..self.data.len()).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                for (v, c) in column.iter_mut().enumerate() {
                    *c = self.data[base + v * stride];
                }
                for (u, row) in p.iter().enumerate() {
                    self.data[base + u * stride] = row.iter().zip(&column).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    /// Applies `exp(duration * generator)` to every variable with `mask[l]`.
    pub fn mutation_flow(&self, generator: &[Vec<f64>], duration: f64, mask: &[bool]) -> Self {
        let mut out = self.clone();
        if duration <= 0.0 {
            return out;
        }
        let p = transition_matrix(generator, duration);
        for var in (0..self.arity).filter(|&l| mask.get(l).copied().unwrap_or(true)) {
            out.apply_matrix(var, &p);
        }
        out
    }

    /// `integral g d(mu_1 x .. x mu_m)`.
    pub fn integrate(&self, measures: &[&[f64]]) -> Result<f64> {
        if measures.len() != self.arity {
            return Err(Error::Contract(format!(
                "{} measures supplied for a function of {} variables",
                measures.len(),
                self.arity
            )));
        }
        let k = self.k;
        let mut current = self.data.clone();
        for mu in measures.iter().rev() {
            current = current.chunks(k).map(|c| c.iter().zip(mu.iter()).map(|(a, b)| a * b).sum()).collect();
        }
        Ok(current[0])
    }

    /// Integrates every variable except `var`; returns a function of `u_var`.
    pub fn partial_integral(&self, measures: &[&[f64]], var: usize) -> Vec<f64> {
        let k = self.k;
        let mut out = vec![0.0; k];
        let mut u = vec![0; self.arity];
        for (idx, g) in self.data.iter().enumerate() {
            decode(idx, k, &mut u);
            let w: f64 = (0..self.arity).filter(|&l| l != var).map(|l| measures[l][u[l]]).product();
            out[u[var]] += g * w;
        }
        out
    }
}

fn decode(mut idx: usize, k: usize, u: &mut [usize]) {
    for slot in u.iter_mut().rev() {
        *slot = idx % k;
        idx /= k;
    }
}

fn check_fitness(chi: &[f64]) -> Result<()> {
    if chi.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Validation("fitness must lie in [0, 1] for the non-negative duals".into()));
    }
    Ok(())
}

/// Evaluates `H(X, (eta, F))`; star-site variables integrate against `rho`.
pub fn evaluate_duality_function(
    x: &PopulationState,
    locations: &[Location],
    f: &DualFunction,
    rho: &[f64],
) -> Result<f64> {
    if locations.len() != f.arity() {
        return Err(Error::Contract(format!(
            "function has {} variables but the particle state has {} elements",
            f.arity(),
            locations.len()
        )));
    }
    let measures: Vec<&[f64]> = locations
        .iter()
        .map(|l| match l {
            Location::Site(s) => x.site(*s),
            Location::Star => rho,
        })
        .collect();
    f.integrate(&measures)
}

/// Birth transition of the function-valued component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionRule {
    Signed,
    Plus,
    GPlus,
}

/// How mutation acts between particle events.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MutationMode {
    /// Deterministic semigroup flow.
    Flow,
    /// Kernel-average jumps at rate `m` per variable.
    RandomJump,
}

#[derive(Clone, Copy, Debug)]
pub struct FunctionDualOptions {
    pub rule: SelectionRule,
    pub mutation: MutationMode,
    pub star: bool,
    pub max_entries: usize,
}

impl FunctionDualOptions {
    pub fn new(rule: SelectionRule) -> Self {
        Self { rule, mutation: MutationMode::Flow, star: false, max_entries: DEFAULT_MAX_ENTRIES }
    }
}

/// Outcome of one replica of a function-valued dual.
#[derive(Clone, Debug)]
pub struct FunctionDualRun {
    pub eta: DualParticleState,
    pub function: DualFunction,
    /// `exp(s * int_0^t |pi_r| dr)` for the signed dual, 1 otherwise.
    pub weight: f64,
    pub births: u32,
    /// Events where a norm bound was broken: `|F_t| <= 2^births |F_0|`
    /// always, and no increase at a coupled selection step.
    pub norm_violations: u32,
}

impl FunctionDualRun {
    /// `weight * H(X, (eta_t, F_t))`.
    pub fn value(&self, x: &PopulationState, rho: &[f64]) -> Result<f64> {
        Ok(self.weight * evaluate_duality_function(x, &self.eta.locations(), &self.function, rho)?)
    }
}

/// Largest horizon for which the signed dual is used: `ln 2 / s`.
pub fn feynman_kac_window(selection: f64) -> f64 {
    if selection > 0.0 {
        std::f64::consts::LN_2 / selection
    } else {
        f64::INFINITY
    }
}

/// Signed dual with Feynman-Kac weight. Horizons outside the window are
/// rejected unless `force` is set.
pub fn run_fk_dual<R: Rng + ?Sized>(
    eta0: &DualParticleState,
    f: &DualFunction,
    model: &Model,
    horizon: f64,
    rng: &mut R,
    force: bool,
) -> Result<FunctionDualRun> {
    let limit = feynman_kac_window(model.selection);
    if horizon >= limit && !force {
        return Err(Error::Window { horizon, limit });
    }
    run_function_dual(eta0, f, model, horizon, rng, &FunctionDualOptions::new(SelectionRule::Signed))
}

/// Non-negative duals (`Plus` or `GPlus`), any horizon.
pub fn run_plus_dual<R: Rng + ?Sized>(
    eta0: &DualParticleState,
    f: &DualFunction,
    model: &Model,
    horizon: f64,
    rng: &mut R,
    options: &FunctionDualOptions,
) -> Result<FunctionDualRun> {
    if options.rule == SelectionRule::Signed {
        return Err(Error::Parameter("run_plus_dual needs the Plus or GPlus rule".into()));
    }
    if options.star && model.types.star_rate() <= 0.0 {
        return Err(Error::Parameter("the star extension needs a positive state-independent rate".into()));
    }
    run_function_dual(eta0, f, model, horizon, rng, options)
}

fn run_function_dual<R: Rng + ?Sized>(
    eta0: &DualParticleState,
    f: &DualFunction,
    model: &Model,
    horizon: f64,
    rng: &mut R,
    options: &FunctionDualOptions,
) -> Result<FunctionDualRun> {
    if f.arity() != eta0.len() {
        return Err(Error::Contract(format!(
            "initial function has {} variables, particle state has {} elements",
            f.arity(),
            eta0.len()
        )));
    }
    if f.k() != model.k() {
        return Err(Error::Contract("function and model disagree on the number of types".into()));
    }
    let star = options.star && model.types.star_rate() > 0.0;
    let dynamics = EtaDynamics::from_model(model, star);
    let (eta_t, log) = simulate_eta(eta0, &dynamics, horizon, rng);

    let types = &model.types;
    let chi = types.fitness();
    let generator = if star { types.residual_generator() } else { types.mutation_generator() };
    let jump_rate = if star { types.mutation_rate() - types.star_rate() } else { types.mutation_rate() };
    let jump_matrix: Vec<Vec<f64>> = if jump_rate > 0.0 {
        (0..model.k())
            .map(|i| {
                (0..model.k())
                    .map(|j| generator[i][j] / jump_rate + if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    let norm0 = f.sup_norm();
    let mut g = f.clone();
    let mut frozen: Vec<bool> = eta0.locations().iter().map(|l| *l == Location::Star).collect();
    let mut now = 0.0;
    let mut occupation = 0.0;
    let mut births = 0u32;
    let mut violations = 0u32;

    let mutate = |g: &mut DualFunction, frozen: &[bool], duration: f64, rng: &mut R| {
        if duration <= 0.0 || types.mutation_rate() == 0.0 {
            return;
        }
        match options.mutation {
            MutationMode::Flow => {
                let mask: Vec<bool> = frozen.iter().map(|s| !s).collect();
                *g = g.mutation_flow(&generator, duration, &mask);
            }
            MutationMode::RandomJump => {
                let live: Vec<usize> = (0..frozen.len()).filter(|&l| !frozen[l]).collect();
                if live.is_empty() || jump_rate <= 0.0 {
                    return;
                }
                let clock = Exp::new(jump_rate * live.len() as f64).expect("positive rate");
                let mut t = clock.sample(rng);
                while t < duration {
                    let var = live[rng.random_range(0..live.len())];
                    g.apply_matrix(var, &jump_matrix);
                    t += clock.sample(rng);
                }
            }
        }
    };

    for ev in &log {
        mutate(&mut g, &frozen, ev.time - now, rng);
        occupation += frozen.len() as f64 * (ev.time - now);
        now = ev.time;
        match ev.kind {
            EventKind::Coalescence { survivor, absorbed } => {
                g = g.coalesce(survivor, absorbed)?;
                frozen.remove(absorbed);
            }
            EventKind::Birth { parent, .. } => {
                if g.data.len() * g.k > options.max_entries {
                    return Err(Error::Aborted(format!("tensor would exceed {} entries", options.max_entries)));
                }
                let before = g.sup_norm();
                g = match options.rule {
                    SelectionRule::Signed => g.select_signed(parent, chi)?,
                    SelectionRule::Plus => g.select_plus(parent, chi)?,
                    SelectionRule::GPlus => g.select_gplus(parent, chi)?,
                };
                births += 1;
                frozen.push(false);
                if options.rule == SelectionRule::GPlus && g.sup_norm() > before * (1.0 + 1e-12) {
                    violations += 1;
                }
            }
            EventKind::StarJump { element } => frozen[element] = true,
            EventKind::Migration { .. } => {}
        }
        if g.sup_norm() > norm0 * 2f64.powi(births as i32) * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    mutate(&mut g, &frozen, horizon - now, rng);
    occupation += frozen.len() as f64 * (horizon - now);
    if g.sup_norm() > norm0 * 2f64.powi(births as i32) * (1.0 + 1e-12) {
        violations += 1;
    }

    let weight = if options.rule == SelectionRule::Signed { (model.selection * occupation).exp() } else { 1.0 };
    Ok(FunctionDualRun { eta: eta_t, function: g, weight, births, norm_violations: violations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_function(k: usize, arity: usize, seed: u64) -> DualFunction {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        DualFunction::from_fn(k, arity, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.3
        })
    }

    #[test]
    fn coalescence_of_indicators_intersects() {
        let a = TypeSet::parse("110").unwrap();
        let b = TypeSet::parse("011").unwrap();
        let g = DualFunction::indicator_product(3, &[a, b]);
        let h = g.coalesce(0, 1).unwrap();
        assert_eq!(h, DualFunction::indicator_product(3, &[a.intersection(b)]));
    }

    #[test]
    fn coalescence_index_check() {
        let g = rand_function(3, 3, 7);
        let h = g.coalesce(0, 2).unwrap();
        for u1 in 0..3 {
            for u2 in 0..3 {
                assert_eq!(h.get(&[u1, u2]), g.get(&[u1, u2, u1]));
            }
        }
        assert!(g.coalesce(2, 1).is_err());
        let c = DualFunction::constant(2, 3, 4.5).coalesce(1, 2).unwrap();
        assert_eq!(c, DualFunction::constant(2, 2, 4.5));
    }

    #[test]
    fn signed_selection_example() {
        let chi = [0.0, 1.0];
        let g = DualFunction::indicator_product(2, &[TypeSet::singleton(1)]);
        let h = g.select_signed(0, &chi).unwrap();
        for u1 in 0..2 {
            for u2 in 0..2 {
                let ind = |t: usize| if t == 1 { 1.0 } else { 0.0 };
                assert_eq!(h.get(&[u1, u2]), ind(u1) - ind(u2) * ind(u1));
            }
        }
        let one = DualFunction::constant(2, 1, 1.0).select_signed(0, &chi).unwrap();
        assert_eq!(one.integrate(&[&[0.3, 0.7], &[0.3, 0.7]]).unwrap(), 0.0);
    }

    #[test]
    fn plus_selection_example() {
        let chi = [0.0, 1.0];
        let g = DualFunction::indicator_product(2, &[TypeSet::singleton(1)]);
        let h = g.select_plus(0, &chi).unwrap();
        for u1 in 0..2 {
            for u2 in 0..2 {
                let expect = if u1 == 1 { 1.0 + if u2 == 0 { 1.0 } else { 0.0 } } else { 0.0 };
                assert_eq!(h.get(&[u1, u2]), expect);
            }
        }
        let zero_fit = DualFunction::constant(2, 1, 1.0).select_plus(0, &[0.0, 0.0]).unwrap();
        assert_eq!(zero_fit, DualFunction::constant(2, 2, 1.0));
        assert!(g.select_plus(0, &[0.0, 1.5]).is_err());
    }

    #[test]
    fn gplus_extremes() {
        let g = rand_function(3, 2, 9);
        let h = g.select_gplus(1, &[1.0, 1.0, 1.0]).unwrap();
        let z = g.select_gplus(1, &[0.0, 0.0, 0.0]).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                for w in 0..3 {
                    assert_eq!(h.get(&[a, b, w]), g.get(&[a, b]));
                    assert_eq!(z.get(&[a, b, w]), g.get(&[a, w]));
                }
            }
        }
    }

    #[test]
    fn flow_two_types() {
        let generator = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
        let g = DualFunction::indicator_product(2, &[TypeSet::singleton(0)]);
        for t in [0.0, 0.5, 1.0, 3.0] {
            let h = g.mutation_flow(&generator, t, &[true]);
            assert!((h.get(&[0]) - (1.0 + (-2.0 * t).exp()) / 2.0).abs() < 1e-12);
        }
        let one = DualFunction::constant(2, 3, 1.0).mutation_flow(&generator, 2.0, &[true; 3]);
        assert!(one.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn integrate_product() {
        let a = TypeSet::parse("110").unwrap();
        let b = TypeSet::parse("011").unwrap();
        let g = DualFunction::indicator_product(3, &[a, b]);
        let x = [0.2, 0.3, 0.5];
        let y = [0.6, 0.1, 0.3];
        let v = g.integrate(&[&x, &y]).unwrap();
        assert!((v - a.mass(&x) * b.mass(&y)).abs() < 1e-15);
        assert!(g.integrate(&[&x]).is_err());
    }
}
