//! Forward process: a particle approximation of the interacting
//! Fleming-Viot system, and exact generator evaluation on moment functions.
//!
//! Each site holds `pop_size` individuals. Per individual, mutation fires at
//! rate `m`, selective replacement at rate `s` and migration at rate `c`.
//! Resampling is a whole-site multinomial redraw at rate `pop_size * d`, so
//! two lineages coalesce at rate `d` and the drift-free variance is
//! `d x (1 - x)`.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp};

use crate::error::{Error, Result};
use crate::function::DualFunction;
use crate::geometry::TypeSet;
use crate::model::{Model, PopulationState};

/// Mixed moment `integral f d(x_{site_1} x .. x x_{site_n})`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentTestFunction {
    pub sites: Vec<usize>,
    pub tensor: DualFunction,
}

impl MomentTestFunction {
    pub fn new(sites: Vec<usize>, tensor: DualFunction) -> Result<Self> {
        if sites.is_empty() || sites.len() != tensor.arity() {
            return Err(Error::Contract("one site per tensor variable, at least one variable".into()));
        }
        Ok(Self { sites, tensor })
    }

    pub fn evaluate(&self, x: &PopulationState) -> Result<f64> {
        let measures: Vec<&[f64]> = self.sites.iter().map(|&s| x.site(s)).collect();
        self.tensor.integrate(&measures)
    }
}

/// Product of subset indicators at given sites: `prod_l x_{site_l}(B_l)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProductMoment {
    pub factors: Vec<(usize, TypeSet)>,
}

impl ProductMoment {
    pub fn new(factors: Vec<(usize, TypeSet)>) -> Self {
        Self { factors }
    }

    pub fn sites(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.0).collect()
    }

    pub fn sets(&self) -> Vec<TypeSet> {
        self.factors.iter().map(|f| f.1).collect()
    }

    pub fn evaluate(&self, x: &PopulationState) -> f64 {
        self.factors.iter().map(|(s, b)| b.mass(x.site(*s))).product()
    }

    pub fn to_test_function(&self, k: usize) -> MomentTestFunction {
        MomentTestFunction { sites: self.sites(), tensor: DualFunction::indicator_product(k, &self.sets()) }
    }
}

/// Integer counts per site and type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MoranSystem {
    k: usize,
    pop_size: u32,
    counts: Vec<u32>,
}

impl MoranSystem {
    /// Counts closest to `pop_size * x` (largest remainders, ties to the
    /// lower type).
    pub fn from_state(x: &PopulationState, pop_size: usize) -> Result<Self> {
        if pop_size < 2 {
            return Err(Error::Parameter(format!("population size {pop_size} must be at least 2")));
        }
        let k = x.k();
        let mut counts = Vec::with_capacity(k * x.site_count());
        for site in x.sites() {
            let scaled: Vec<f64> = site.iter().map(|p| p * pop_size as f64).collect();
            let mut c: Vec<u32> = scaled.iter().map(|v| v.floor() as u32).collect();
            let mut missing = pop_size as i64 - c.iter().map(|&v| v as i64).sum::<i64>();
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| (scaled[b] - scaled[b].floor()).total_cmp(&(scaled[a] - scaled[a].floor())));
            for &t in order.iter().cycle() {
                if missing <= 0 {
                    break;
                }
                c[t] += 1;
                missing -= 1;
            }
            counts.extend(c);
        }
        Ok(Self { k, pop_size: pop_size as u32, counts })
    }

    pub fn site_counts(&self, site: usize) -> &[u32] {
        &self.counts[site * self.k..(site + 1) * self.k]
    }

    pub fn to_state(&self) -> PopulationState {
        let n = self.pop_size as f64;
        let sites = self.counts.chunks(self.k).map(|c| c.iter().map(|&v| v as f64 / n).collect()).collect();
        PopulationState::new(sites).expect("counts sum to the population size")
    }

    fn pick_type<R: Rng + ?Sized>(&self, site: usize, rng: &mut R) -> usize {
        let mut u = rng.random_range(0..self.pop_size);
        for (t, &c) in self.site_counts(site).iter().enumerate() {
            if u < c {
                return t;
            }
            u -= c;
        }
        unreachable!("counts sum to the population size")
    }

    fn resample<R: Rng + ?Sized>(&mut self, site: usize, rng: &mut R) {
        let k = self.k;
        let old: Vec<u32> = self.site_counts(site).to_vec();
        let mut remaining_draws = self.pop_size as u64;
        let mut remaining_mass = self.pop_size as u64;
        for t in 0..k {
            let c = old[t] as u64;
            let drawn = if remaining_draws == 0 || c == 0 {
                0
            } else if c >= remaining_mass {
                remaining_draws
            } else {
                Binomial::new(remaining_draws, c as f64 / remaining_mass as f64).expect("valid p").sample(rng)
            };
            self.counts[site * k + t] = drawn as u32;
            remaining_draws -= drawn;
            remaining_mass -= c;
        }
    }

    fn shift(&mut self, site: usize, from: usize, to: usize) {
        self.counts[site * self.k + from] -= 1;
        self.counts[site * self.k + to] += 1;
    }

    /// Runs the event-driven particle system for `horizon` time units.
    pub fn run<R: Rng + ?Sized>(&mut self, model: &Model, horizon: f64, rng: &mut R) -> Result<()> {
        if !(horizon >= 0.0) {
            return Err(Error::Parameter(format!("horizon {horizon} must be >= 0")));
        }
        let sites = self.counts.len() / self.k;
        let n = self.pop_size as f64;
        let types = &model.types;
        let chi = types.fitness();
        let migration = if sites > 1 { model.migration() } else { 0.0 };
        let per_site = [model.resampling * n, types.mutation_rate() * n, model.selection * n, migration * n];
        let site_rate: f64 = per_site.iter().sum();
        if site_rate <= 0.0 {
            return Ok(());
        }
        let clock = Exp::new(site_rate * sites as f64).expect("positive rate");
        let mut t = clock.sample(rng);
        while t <= horizon {
            let site = if sites == 1 { 0 } else { rng.random_range(0..sites) };
            let mut u = rng.random::<f64>() * site_rate;
            let mut kind = 0;
            while kind < 3 && u >= per_site[kind] {
                u -= per_site[kind];
                kind += 1;
            }
            while per_site[kind] == 0.0 {
                kind -= 1;
            }
            match kind {
                0 => self.resample(site, rng),
                1 => {
                    let from = self.pick_type(site, rng);
                    let to = sample_row(&types.mutation_matrix()[from], rng);
                    if to != from {
                        self.shift(site, from, to);
                    }
                }
                2 => {
                    let target = self.pick_type(site, rng);
                    let parent = self.pick_type(site, rng);
                    if target != parent && rng.random::<f64>() < chi[parent] {
                        self.shift(site, target, parent);
                    }
                }
                _ => {
                    let migrant = self.pick_type(site, rng);
                    let dest = model.kernel.sample_target(rng, site);
                    let replaced = self.pick_type(dest, rng);
                    if replaced != migrant {
                        self.shift(dest, replaced, migrant);
                    }
                }
            }
            t += clock.sample(rng);
        }
        Ok(())
    }
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    for (j, p) in row.iter().enumerate() {
        if u < *p {
            return j;
        }
        u -= p;
    }
    row.iter().rposition(|p| *p > 0.0).unwrap_or(row.len() - 1)
}

/// Simulates the particle approximation from `x0` and returns the empirical
/// type frequencies at `horizon`.
pub fn simulate_forward<R: Rng + ?Sized>(
    model: &Model,
    pop_size: usize,
    x0: &PopulationState,
    horizon: f64,
    rng: &mut R,
) -> Result<PopulationState> {
    if !(horizon >= 0.0) {
        return Err(Error::Parameter(format!("horizon {horizon} must be >= 0")));
    }
    if x0.site_count() != model.site_count() || x0.k() != model.k() {
        return Err(Error::Contract("initial state does not match the model's sites and types".into()));
    }
    let mut system = MoranSystem::from_state(x0, pop_size)?;
    system.run(model, horizon, rng)?;
    Ok(system.to_state())
}

/// `(L F)(X)` for a moment function, from the closed-form first and second
/// derivatives. Resampling contributes `d` per unordered co-located pair.
pub fn generator_apply(f: &MomentTestFunction, x: &PopulationState, model: &Model) -> Result<f64> {
    let n = f.sites.len();
    if f.sites.iter().any(|&s| s >= x.site_count()) {
        return Err(Error::Contract("test function sites outside the population state".into()));
    }
    let k = model.k();
    let types = &model.types;
    let chi = types.fitness();
    let measures: Vec<&[f64]> = f.sites.iter().map(|&s| x.site(s)).collect();
    let base = f.tensor.integrate(&measures)?;
    let mut total = 0.0;
    for l in 0..n {
        let xi = x.site(f.sites[l]);
        let derivative = f.tensor.partial_integral(&measures, l);
        let pair = |mu: &[f64]| -> f64 { derivative.iter().zip(mu).map(|(a, b)| a * b).sum() };
        // Migration: inflow from the reversed kernel.
        if model.migration() > 0.0 {
            let here = f.sites[l];
            let mut drift = vec![0.0; k];
            for other in 0..x.site_count() {
                let a = model.kernel.reversed_probability(here, other);
                if a > 0.0 {
                    for t in 0..k {
                        drift[t] += a * (x.site(other)[t] - xi[t]);
                    }
                }
            }
            total += model.migration() * pair(&drift);
        }
        if model.selection > 0.0 {
            let mean: f64 = xi.iter().zip(chi).map(|(a, b)| a * b).sum();
            let drift: Vec<f64> = (0..k).map(|t| xi[t] * (chi[t] - mean)).collect();
            total += model.selection * pair(&drift);
        }
        if types.mutation_rate() > 0.0 {
            let m = types.mutation_matrix();
            let drift: Vec<f64> = (0..k)
                .map(|v| (0..k).map(|u| xi[u] * m[u][v]).sum::<f64>() - xi[v])
                .collect();
            total += types.mutation_rate() * pair(&drift);
        }
    }
    if model.resampling > 0.0 {
        for i in 0..n {
            for j in i + 1..n {
                if f.sites[i] == f.sites[j] {
                    let merged = f.tensor.coalesce(i, j)?;
                    let mut reduced = measures.clone();
                    reduced.remove(j);
                    total += model.resampling * (merged.integrate(&reduced)? - base);
                }
            }
        }
    }
    Ok(total)
}
