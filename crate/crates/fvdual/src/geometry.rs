//! Geographic space, migration kernels and the finite type space.
//!
//! Sites are addressed by dense indices `0..site_count()`. For the
//! hierarchical group the index is the base-`N` number whose digit `i` is the
//! address digit at level `i`, truncated at the declared depth.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when merging nearly equal fitness values into one level.
pub const FITNESS_TOLERANCE: f64 = 1e-12;

/// Largest supported number of types (subsets are stored as `u64` bitmasks).
pub const MAX_TYPES: usize = 64;

/// A subset of the type space `{0, .., K-1}` stored as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct TypeSet(u64);

impl TypeSet {
    pub const EMPTY: TypeSet = TypeSet(0);

    pub fn from_bits(bits: u64) -> Self {
        TypeSet(bits)
    }

    pub fn full(k: usize) -> Self {
        if k >= 64 {
            TypeSet(u64::MAX)
        } else {
            TypeSet((1u64 << k) - 1)
        }
    }

    pub fn singleton(t: usize) -> Self {
        TypeSet(1u64 << t)
    }

    pub fn from_types<I: IntoIterator<Item = usize>>(types: I) -> Self {
        TypeSet(types.into_iter().fold(0, |acc, t| acc | (1u64 << t)))
    }

    /// Parses the bitstring notation `"0110"` (leftmost character is type 0).
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches('(').trim_end_matches(')');
        let mut bits = 0u64;
        for (i, c) in s.chars().enumerate() {
            match c {
                '1' => bits |= 1u64 << i,
                '0' => {}
                _ => return Err(Error::Parameter(format!("invalid type-set character {c:?}"))),
            }
        }
        Ok(TypeSet(bits))
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, t: usize) -> bool {
        self.0 >> t & 1 == 1
    }

    pub fn with(self, t: usize) -> Self {
        TypeSet(self.0 | 1u64 << t)
    }

    pub fn without(self, t: usize) -> Self {
        TypeSet(self.0 & !(1u64 << t))
    }

    pub fn union(self, other: Self) -> Self {
        TypeSet(self.0 | other.0)
    }

    pub fn intersection(self, other: Self) -> Self {
        TypeSet(self.0 & other.0)
    }

    pub fn complement(self, k: usize) -> Self {
        TypeSet(!self.0 & TypeSet::full(k).0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_full(self, k: usize) -> bool {
        self == TypeSet::full(k)
    }

    pub fn is_disjoint(self, other: Self) -> bool {
        self.0 & other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn types(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&t| self.contains(t))
    }

    /// Mass of the set under a probability vector.
    pub fn mass(self, x: &[f64]) -> f64 {
        x.iter().enumerate().filter(|(t, _)| self.contains(*t)).map(|(_, p)| p).sum()
    }

    /// Preimage under the map sending type `from` to type `to`: the set jump
    /// of a mutation `from -> to`.
    pub fn mutation_preimage(self, from: usize, to: usize) -> Self {
        if self.contains(to) {
            self.with(from)
        } else {
            self.without(from)
        }
    }

    /// Bitstring notation over `k` types, e.g. `0110`.
    pub fn notation(self, k: usize) -> String {
        (0..k).map(|t| if self.contains(t) { '1' } else { '0' }).collect()
    }
}

impl fmt::Debug for TypeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TypeSet({:#b})", self.0)
    }
}

/// Element of the hierarchical group: a finitely supported digit sequence.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct HierarchicalAddress {
    n: u32,
    digits: Vec<u32>,
}

impl HierarchicalAddress {
    pub fn new(n: u32, mut digits: Vec<u32>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Parameter(format!("group order N = {n} must be at least 2")));
        }
        if let Some(d) = digits.iter().find(|&&d| d >= n) {
            return Err(Error::Parameter(format!("digit {d} outside [0, {})", n - 1)));
        }
        while digits.last() == Some(&0) {
            digits.pop();
        }
        Ok(Self { n, digits })
    }

    pub fn origin(n: u32) -> Result<Self> {
        Self::new(n, Vec::new())
    }

    pub fn order(&self) -> u32 {
        self.n
    }

    pub fn digit(&self, level: usize) -> u32 {
        self.digits.get(level).copied().unwrap_or(0)
    }

    /// Number of digits up to the last nonzero one.
    pub fn support_len(&self) -> usize {
        self.digits.len()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_order(other)?;
        let len = self.digits.len().max(other.digits.len());
        let digits = (0..len).map(|i| (self.digit(i) + other.digit(i)) % self.n).collect();
        Self::new(self.n, digits)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_order(other)?;
        let len = self.digits.len().max(other.digits.len());
        let digits = (0..len)
            .map(|i| (self.digit(i) + self.n - other.digit(i)) % self.n)
            .collect();
        Self::new(self.n, digits)
    }

    fn same_order(&self, other: &Self) -> Result<()> {
        if self.n != other.n {
            return Err(Error::Parameter(format!(
                "addresses belong to different groups (N = {} and N = {})",
                self.n, other.n
            )));
        }
        Ok(())
    }
}

impl fmt::Display for HierarchicalAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let digits: Vec<String> = self.digits.iter().map(|d| d.to_string()).collect();
        write!(f, "({},0,..)", digits.join(","))
    }
}

/// Ultrametric distance: the smallest `k` such that the digits agree from
/// index `k` on (indices counted from 1).
pub fn ultrametric_distance(a: &HierarchicalAddress, b: &HierarchicalAddress) -> Result<usize> {
    a.same_order(b)?;
    let len = a.digits.len().max(b.digits.len());
    Ok((0..len).rev().find(|&i| a.digit(i) != b.digit(i)).map_or(0, |i| i + 1))
}

/// Geographic space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Geography {
    Single,
    /// `N` sites; a migrant picks its destination uniformly, itself included.
    Island { sites: usize },
    /// `Z_N^depth`; level `k` is chosen with weight `c_{k-1} / N^{k-1}`.
    Hierarchical { n: usize, depth: usize, level_rates: Vec<f64> },
}

/// Migration mechanism: per-individual rate `c` and a homogeneous kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct MigrationKernel {
    rate: f64,
    geography: Geography,
    level_probs: Vec<f64>,
}

impl MigrationKernel {
    pub fn new(rate: f64, geography: Geography) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::Parameter(format!("migration rate {rate} must be finite and >= 0")));
        }
        let level_probs = match &geography {
            Geography::Single => Vec::new(),
            Geography::Island { sites } => {
                if *sites == 0 {
                    return Err(Error::Parameter("island model needs at least one site".into()));
                }
                Vec::new()
            }
            Geography::Hierarchical { n, depth, level_rates } => hierarchical_level_probs(*n, *depth, level_rates)?,
        };
        Ok(Self { rate, geography, level_probs })
    }

    pub fn single() -> Self {
        Self { rate: 0.0, geography: Geography::Single, level_probs: Vec::new() }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn geography(&self) -> &Geography {
        &self.geography
    }

    /// Probability of choosing level `k` (1-based); hierarchical mode only.
    pub fn level_probability(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        self.level_probs.get(k - 1).copied().unwrap_or(0.0)
    }

    pub fn site_count(&self) -> usize {
        match &self.geography {
            Geography::Single => 1,
            Geography::Island { sites } => *sites,
            Geography::Hierarchical { n, depth, .. } => n.pow(*depth as u32),
        }
    }

    /// Address of a site; the island and single geographies use `N = sites`
    /// (at least 2) with one digit.
    pub fn address(&self, site: usize) -> HierarchicalAddress {
        match &self.geography {
            Geography::Single => HierarchicalAddress::new(2, Vec::new()).expect("valid"),
            Geography::Island { sites } => {
                HierarchicalAddress::new((*sites).max(2) as u32, vec![site as u32]).expect("valid")
            }
            Geography::Hierarchical { n, depth, .. } => {
                let mut rest = site;
                let digits = (0..*depth)
                    .map(|_| {
                        let d = rest % n;
                        rest /= n;
                        d as u32
                    })
                    .collect();
                HierarchicalAddress::new(*n as u32, digits).expect("valid")
            }
        }
    }

    pub fn site(&self, address: &HierarchicalAddress) -> Result<usize> {
        let out_of_range = || Error::Parameter(format!("address {address} outside the simulated region"));
        match &self.geography {
            Geography::Single => {
                if address.support_len() == 0 {
                    Ok(0)
                } else {
                    Err(out_of_range())
                }
            }
            Geography::Island { sites } => {
                let s = address.digit(0) as usize;
                if address.support_len() <= 1 && s < *sites {
                    Ok(s)
                } else {
                    Err(out_of_range())
                }
            }
            Geography::Hierarchical { n, depth, .. } => {
                if address.order() as usize != *n || address.support_len() > *depth {
                    return Err(out_of_range());
                }
                Ok((0..*depth).rev().fold(0, |acc, i| acc * n + address.digit(i) as usize))
            }
        }
    }

    /// Distance between two sites: ultrametric for the hierarchical group,
    /// 0/1 otherwise.
    pub fn distance(&self, a: usize, b: usize) -> usize {
        match &self.geography {
            Geography::Hierarchical { n, .. } => {
                let (mut a, mut b, mut level, mut d) = (a, b, 0, 0);
                while a != 0 || b != 0 {
                    level += 1;
                    if a % n != b % n {
                        d = level;
                    }
                    a /= n;
                    b /= n;
                }
                d
            }
            _ => usize::from(a != b),
        }
    }

    /// Kernel probability `a(from, to)`.
    pub fn probability(&self, from: usize, to: usize) -> f64 {
        match &self.geography {
            Geography::Single => 1.0,
            Geography::Island { sites } => 1.0 / *sites as f64,
            Geography::Hierarchical { n, .. } => {
                let d = self.distance(from, to).max(1);
                (d..=self.level_probs.len())
                    .map(|k| self.level_probs[k - 1] / (*n as f64).powi(k as i32))
                    .sum()
            }
        }
    }

    /// Reversed kernel `a(to, from)`, the jump law of dual lineages.
    pub fn reversed_probability(&self, from: usize, to: usize) -> f64 {
        self.probability(to, from)
    }

    /// Draws a destination distributed as `a(from, .)`.
    pub fn sample_target<R: Rng + ?Sized>(&self, rng: &mut R, from: usize) -> usize {
        match &self.geography {
            Geography::Single => from,
            Geography::Island { sites } => rng.random_range(0..*sites),
            Geography::Hierarchical { n, .. } => {
                let (block, offset) = self.sample_displacement(rng, *n);
                let base = from - from % block;
                base + digitwise(from % block, offset, *n, block, |a, b, n| (a + b) % n)
            }
        }
    }

    /// Draws a destination distributed as the reversed kernel `a(., from)`.
    pub fn sample_reversed_target<R: Rng + ?Sized>(&self, rng: &mut R, from: usize) -> usize {
        match &self.geography {
            Geography::Single => from,
            Geography::Island { sites } => rng.random_range(0..*sites),
            Geography::Hierarchical { n, .. } => {
                let (block, offset) = self.sample_displacement(rng, *n);
                let base = from - from % block;
                base + digitwise(from % block, offset, *n, block, |a, b, n| (a + n - b) % n)
            }
        }
    }

    /// Draws a destination for an explicit address.
    pub fn sample_migration_target<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        from: &HierarchicalAddress,
    ) -> Result<HierarchicalAddress> {
        let site = self.site(from)?;
        Ok(self.address(self.sample_target(rng, site)))
    }

    /// Level block size `N^k` and a uniform displacement inside the block.
    fn sample_displacement<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> (usize, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut level = self.level_probs.len();
        for (i, p) in self.level_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                level = i + 1;
                break;
            }
        }
        let block = n.pow(level as u32);
        (block, rng.random_range(0..block))
    }
}

/// Applies `op` digit by digit to two base-`n` numbers below `block`.
fn digitwise(a: usize, b: usize, n: usize, block: usize, op: impl Fn(usize, usize, usize) -> usize) -> usize {
    let (mut a, mut b, mut scale, mut out) = (a, b, 1, 0);
    while scale < block {
        out += op(a % n, b % n, n) * scale;
        a /= n;
        b /= n;
        scale *= n;
    }
    out
}

/// Normalized level weights `c_{k-1} / N^{k-1}`, tail beyond `depth` folded
/// into the deepest level.
fn hierarchical_level_probs(n: usize, depth: usize, level_rates: &[f64]) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Parameter(format!("group order N = {n} must be at least 2")));
    }
    if depth == 0 {
        return Err(Error::Parameter("hierarchical depth must be at least 1".into()));
    }
    if level_rates.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::Parameter("level rates must be finite and nonnegative".into()));
    }
    let mut weights = vec![0.0; depth];
    for (k, c) in level_rates.iter().enumerate() {
        let w = c / (n as f64).powi(k as i32);
        weights[k.min(depth - 1)] += w;
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Parameter("level rates must have a positive finite weighted sum".into()));
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Finite type space with fitness, mutation and the optional state-independent
/// mutation component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeSpace {
    fitness: Vec<f64>,
    mutation_matrix: Vec<Vec<f64>>,
    mutation_rate: f64,
    star_rate: f64,
    base_measure: Vec<f64>,
}

impl TypeSpace {
    /// Builds a type space; `base_measure` may be empty when `star_rate == 0`.
    pub fn new(
        fitness: Vec<f64>,
        mutation_matrix: Vec<Vec<f64>>,
        mutation_rate: f64,
        star_rate: f64,
        base_measure: Vec<f64>,
    ) -> Result<Self> {
        let problems = Self::problems(&fitness, &mutation_matrix, mutation_rate, star_rate, &base_measure);
        if !problems.is_empty() {
            return Err(Error::Validation(problems.join("; ")));
        }
        let base_measure = if base_measure.is_empty() {
            vec![1.0 / fitness.len() as f64; fitness.len()]
        } else {
            base_measure
        };
        Ok(Self { fitness, mutation_matrix, mutation_rate, star_rate, base_measure })
    }

    /// Every violated constraint, as `(field, message)` text.
    pub fn problems(
        fitness: &[f64],
        mutation_matrix: &[Vec<f64>],
        mutation_rate: f64,
        star_rate: f64,
        base_measure: &[f64],
    ) -> Vec<String> {
        let mut out = Vec::new();
        let k = fitness.len();
        if k == 0 || k > MAX_TYPES {
            out.push(format!("fitness: number of types {k} must be in 1..={MAX_TYPES}"));
        }
        if fitness.iter().any(|c| !(0.0..=1.0).contains(c)) {
            out.push("fitness: values must lie in [0, 1]".into());
        }
        if k > 1 {
            let min = fitness.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = fitness.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if min.abs() > FITNESS_TOLERANCE {
                out.push(format!("fitness: minimum is {min}, must be 0"));
            }
            if (max - 1.0).abs() > FITNESS_TOLERANCE {
                out.push(format!("fitness: maximum is {max}, must be 1"));
            }
        }
        if mutation_matrix.len() != k || mutation_matrix.iter().any(|r| r.len() != k) {
            out.push(format!("mutation_matrix: must be {k}x{k}"));
        } else {
            for (i, row) in mutation_matrix.iter().enumerate() {
                if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                    out.push(format!("mutation_matrix[{i}]: entries must be nonnegative"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    out.push(format!("mutation_matrix[{i}]: row sums to {sum}, must be 1"));
                }
            }
        }
        if !(mutation_rate >= 0.0 && mutation_rate.is_finite()) {
            out.push(format!("mutation_rate: {mutation_rate} must be finite and >= 0"));
        }
        if !(star_rate >= 0.0 && star_rate.is_finite()) {
            out.push(format!("star_rate: {star_rate} must be finite and >= 0"));
        }
        if !base_measure.is_empty() {
            let sum: f64 = base_measure.iter().sum();
            if base_measure.len() != k || base_measure.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                out.push("base_measure: must be a probability vector over the types".into());
            }
        }
        if star_rate > 0.0 {
            if base_measure.is_empty() {
                out.push("base_measure: required when star_rate > 0".into());
            } else if out.is_empty() {
                for (i, row) in mutation_matrix.iter().enumerate() {
                    for (j, p) in row.iter().enumerate() {
                        if mutation_rate * p < star_rate * base_measure[j] - 1e-12 {
                            out.push(format!(
                                "star_rate: dominance m*M >= mbar*rho violated at ({i},{j}): {} < {}",
                                mutation_rate * p,
                                star_rate * base_measure[j]
                            ));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn k(&self) -> usize {
        self.fitness.len()
    }

    pub fn fitness(&self) -> &[f64] {
        &self.fitness
    }

    pub fn mutation_matrix(&self) -> &[Vec<f64>] {
        &self.mutation_matrix
    }

    pub fn mutation_rate(&self) -> f64 {
        self.mutation_rate
    }

    pub fn star_rate(&self) -> f64 {
        self.star_rate
    }

    pub fn base_measure(&self) -> &[f64] {
        &self.base_measure
    }

    pub fn full_set(&self) -> TypeSet {
        TypeSet::full(self.k())
    }

    /// Rate `m * M(i, j)` of a mutation `i -> j`, `i != j`.
    pub fn pair_rate(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            self.mutation_rate * self.mutation_matrix[i][j]
        }
    }

    /// Total rate of effective set jumps per variable, `sum_{i != j} m M(i,j)`.
    pub fn total_pair_rate(&self) -> f64 {
        (0..self.k()).flat_map(|i| (0..self.k()).map(move |j| (i, j))).map(|(i, j)| self.pair_rate(i, j)).sum()
    }

    /// Generator `m (M - I)` of the one-variable mutation semigroup.
    pub fn mutation_generator(&self) -> Vec<Vec<f64>> {
        let k = self.k();
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| self.mutation_rate * (self.mutation_matrix[i][j] - if i == j { 1.0 } else { 0.0 }))
                    .collect()
            })
            .collect()
    }

    /// Generator left after removing the state-independent part:
    /// `m M - mbar (1 x rho) - (m - mbar) I`.
    pub fn residual_generator(&self) -> Vec<Vec<f64>> {
        let k = self.k();
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        self.mutation_rate * self.mutation_matrix[i][j] - self.star_rate * self.base_measure[j]
                            - if i == j { self.mutation_rate - self.star_rate } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Fitness levels `0 = e_1 < .. < e_l = 1`, level sets `A_i = {chi >= e_i}`
/// and birth-level probabilities `e_i - e_{i-1}` for `i = 2..l`.
#[derive(Clone, Debug, PartialEq)]
pub struct FitnessDecomposition {
    levels: Vec<f64>,
    level_sets: Vec<TypeSet>,
    probabilities: Vec<f64>,
}

impl FitnessDecomposition {
    pub fn new(fitness: &[f64]) -> Result<Self> {
        if fitness.is_empty() || fitness.len() > MAX_TYPES {
            return Err(Error::Validation("fitness must have between 1 and 64 entries".into()));
        }
        if fitness.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Validation("fitness values must lie in [0, 1]".into()));
        }
        let min = fitness.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = fitness.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min.abs() > FITNESS_TOLERANCE || (max - 1.0).abs() > FITNESS_TOLERANCE {
            return Err(Error::Validation(format!("fitness must have min 0 and max 1, got [{min}, {max}]")));
        }
        let mut levels: Vec<f64> = Vec::new();
        let mut sorted = fitness.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        for v in sorted {
            match levels.last() {
                Some(&last) if (v - last).abs() <= FITNESS_TOLERANCE => {}
                _ => levels.push(v),
            }
        }
        levels[0] = 0.0;
        *levels.last_mut().expect("nonempty") = 1.0;
        let level_sets = levels[1..]
            .iter()
            .map(|&e| TypeSet::from_types((0..fitness.len()).filter(|&j| fitness[j] >= e - FITNESS_TOLERANCE)))
            .collect();
        let probabilities = levels.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self { levels, level_sets, probabilities })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// `A_2, .., A_l`.
    pub fn level_sets(&self) -> &[TypeSet] {
        &self.level_sets
    }

    /// `e_i - e_{i-1}` for `i = 2..l`.
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Samples an index into `level_sets()`.
    pub fn sample_level<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probabilities.len().saturating_sub(1)
    }

    /// `sum_i (e_i - e_{i-1}) 1_{A_i}(t)`.
    pub fn reconstruct(&self, t: usize) -> f64 {
        self.level_sets
            .iter()
            .zip(&self.probabilities)
            .filter(|(a, _)| a.contains(t))
            .map(|(_, p)| p)
            .sum()
    }
}
