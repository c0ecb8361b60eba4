//! Tableau duals: rows are disjoint products of subsets, columns are ranks
//! with a location. Includes the autonomous set-valued dual and the mutation
//! partition chain with its h-transforms.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::geometry::TypeSet;
use crate::model::{Model, PopulationState};
use crate::particle::Location;
use crate::refined::{rows_disjoint, IndicatorDual, SetJumpTable};

/// Largest number of points enumerated by the factoring test.
const FACTOR_ENUMERATION_LIMIT: usize = 1 << 20;

/// A rank: its location and the set of initial clouds it descends from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Column {
    pub location: Location,
    pub cloud: u64,
}

impl Column {
    pub fn at(location: Location) -> Self {
        Self { location, cloud: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tableau {
    k: usize,
    columns: Vec<Column>,
    rows: Vec<Vec<TypeSet>>,
}

impl Tableau {
    pub fn new(k: usize, columns: Vec<Column>, rows: Vec<Vec<TypeSet>>) -> Result<Self> {
        let full = TypeSet::full(k);
        for row in &rows {
            if row.len() != columns.len() {
                return Err(Error::Contract(format!("row of width {} in a tableau with {} columns", row.len(), columns.len())));
            }
            if row.iter().any(|b| b.intersection(full) != *b) {
                return Err(Error::Contract(format!("entry outside the {k} types")));
            }
        }
        if !rows_disjoint(&rows) {
            return Err(Error::Contract("tableau rows must be disjoint".into()));
        }
        let mut t = Self { k, columns, rows };
        t.drop_zero_rows();
        Ok(t)
    }

    /// One row `prod_l 1_{B_l}` with the given column locations.
    pub fn product(k: usize, factors: &[(Location, TypeSet)]) -> Result<Self> {
        let columns = factors.iter().map(|f| Column::at(f.0)).collect();
        Self::new(k, columns, vec![factors.iter().map(|f| f.1).collect()])
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn columns_mut(&mut self) -> &mut [Column] {
        &mut self.columns
    }

    pub fn rows(&self) -> &[Vec<TypeSet>] {
        &self.rows
    }

    pub fn width(&self) -> usize {
        self.columns.len()
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

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank >= self.columns.len() {
            return Err(Error::Contract(format!("rank {rank} is not active ({} columns)", self.columns.len())));
        }
        Ok(())
    }

    /// Coupled selection at `rank`: a new column is inserted at `rank + 1`
    /// and every row `e` at `rank` splits into `(A n e, 1)` followed by
    /// `(A^c, e)`. Rows with a full entry at `rank` are kept whole.
    pub fn selection(&mut self, rank: usize, level: TypeSet) -> Result<()> {
        self.check_rank(rank)?;
        let k = self.k;
        let full = TypeSet::full(k);
        let complement = level.complement(k);
        let mut rows = Vec::with_capacity(self.rows.len() * 2);
        for row in &self.rows {
            let e = row[rank];
            let mut first = row.clone();
            first.insert(rank + 1, full);
            if e.is_full(k) {
                rows.push(first);
                continue;
            }
            first[rank] = e.intersection(level);
            let mut second = row.clone();
            second[rank] = complement;
            second.insert(rank + 1, e);
            rows.push(first);
            rows.push(second);
        }
        self.rows = rows;
        self.columns.insert(rank + 1, self.columns[rank]);
        self.drop_zero_rows();
        Ok(())
    }

    /// Intersects column `high` into `low` and removes `high`.
    pub fn coalesce(&mut self, low: usize, high: usize) -> Result<()> {
        if low >= high || high >= self.columns.len() {
            return Err(Error::Contract(format!("coalescence needs low < high < width, got ({low}, {high})")));
        }
        if self.columns[low].location != self.columns[high].location {
            return Err(Error::Contract(format!("ranks {low} and {high} are not co-located")));
        }
        for row in &mut self.rows {
            let b = row.remove(high);
            row[low] = row[low].intersection(b);
        }
        let gone = self.columns.remove(high);
        self.columns[low].cloud |= gone.cloud;
        self.drop_zero_rows();
        Ok(())
    }

    pub fn mutation_jump(&mut self, rank: usize, from: usize, to: usize) -> Result<()> {
        self.check_rank(rank)?;
        for row in &mut self.rows {
            row[rank] = row[rank].mutation_preimage(from, to);
        }
        self.drop_zero_rows();
        Ok(())
    }

    /// Moves `rank` to `to`. In strict mode an occupied destination must
    /// factor off the rest of the tableau.
    pub fn migrate(&mut self, rank: usize, to: Location, strict: bool) -> Result<()> {
        self.check_rank(rank)?;
        if strict {
            let group: Vec<usize> =
                (0..self.columns.len()).filter(|&c| c != rank && self.columns[c].location == to).collect();
            if !group.is_empty() && !self.factors(&group)? {
                return Err(Error::Unsupported(format!(
                    "migration of rank {rank} into an occupied site whose state does not factor"
                )));
            }
        }
        self.columns[rank].location = to;
        Ok(())
    }

    /// Removes rows with an empty entry, then columns that are full in
    /// every row. Returns the removed column indices in increasing order.
    pub fn prune(&mut self) -> Vec<usize> {
        self.drop_zero_rows();
        let k = self.k;
        let removed: Vec<usize> =
            (0..self.columns.len()).filter(|&c| self.rows.iter().all(|r| r[c].is_full(k))).collect();
        if !removed.is_empty() {
            for row in &mut self.rows {
                for &c in removed.iter().rev() {
                    row.remove(c);
                }
            }
            for &c in removed.iter().rev() {
                self.columns.remove(c);
            }
        }
        removed
    }

    /// Merges rows that differ in exactly one column (their entries there
    /// are disjoint, so the union represents the same set), then prunes.
    /// Returns removed column indices as `prune` does, relative to the
    /// columns before the call.
    pub fn simplify(&mut self) -> Vec<usize> {
        let mut original: Vec<usize> = (0..self.columns.len()).collect();
        let mut removed_all = Vec::new();
        loop {
            let mut merged = false;
            for c in 0..self.columns.len() {
                let mut i = 0;
                while i < self.rows.len() {
                    let mut j = i + 1;
                    while j < self.rows.len() {
                        let same_elsewhere =
                            (0..self.columns.len()).all(|d| d == c || self.rows[i][d] == self.rows[j][d]);
                        if same_elsewhere {
                            let other = self.rows.remove(j);
                            self.rows[i][c] = self.rows[i][c].union(other[c]);
                            merged = true;
                        } else {
                            j += 1;
                        }
                    }
                    i += 1;
                }
            }
            let removed = self.prune();
            for &c in removed.iter().rev() {
                removed_all.push(original.remove(c));
            }
            if !merged && removed.is_empty() {
                break;
            }
        }
        removed_all.sort_unstable();
        removed_all
    }

    /// `sum_rows prod_cols x_{loc}(entry)`; star columns use `rho`.
    pub fn evaluate(&self, x: &PopulationState, rho: &[f64]) -> f64 {
        let measures: Vec<&[f64]> = self
            .columns
            .iter()
            .map(|c| match c.location {
                Location::Site(s) => x.site(s),
                Location::Star => rho,
            })
            .collect();
        self.rows.iter().map(|r| r.iter().zip(&measures).map(|(b, mu)| b.mass(mu)).product::<f64>()).sum()
    }

    /// `Some(value)` once the represented set is empty or everything.
    pub fn trap(&self) -> Option<bool> {
        if self.rows.is_empty() {
            return Some(false);
        }
        if self.columns.is_empty() {
            return Some(true);
        }
        let bits = (self.k as f64).log2() * self.columns.len() as f64;
        if bits > 120.0 {
            return None;
        }
        let k = self.k as u128;
        let total = k.pow(self.columns.len() as u32);
        let covered: u128 = self.rows.iter().map(|r| r.iter().map(|b| b.len() as u128).product::<u128>()).sum();
        (covered == total).then_some(true)
    }

    pub fn rows_disjoint(&self) -> bool {
        rows_disjoint(&self.rows)
    }

    /// Non-full entries of every column are pairwise equal or disjoint.
    pub fn column_structure_holds(&self) -> bool {
        (0..self.columns.len()).all(|c| {
            let entries: Vec<TypeSet> =
                self.rows.iter().map(|r| r[c]).filter(|b| !b.is_full(self.k)).collect();
            entries.iter().enumerate().all(|(i, a)| entries[i + 1..].iter().all(|b| a == b || a.is_disjoint(*b)))
        })
    }

    /// No row has an empty entry and no column is full in every row.
    pub fn is_pruned(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(|b| !b.is_empty()))
            && (0..self.columns.len()).all(|c| self.rows.iter().any(|r| !r[c].is_full(self.k)))
    }

    /// Whether the represented set is a Cartesian product of its projections
    /// onto `group` and onto the remaining columns.
    pub fn factors(&self, group: &[usize]) -> Result<bool> {
        let inside: Vec<usize> = group.to_vec();
        let outside: Vec<usize> = (0..self.columns.len()).filter(|c| !group.contains(c)).collect();
        let size = |cols: &[usize], row: &[TypeSet]| -> usize { cols.iter().map(|&c| row[c].len()).product() };
        let total: usize = self.rows.iter().map(|r| size(&inside, r) * size(&outside, r)).sum();
        let work: usize = self.rows.iter().map(|r| size(&inside, r) + size(&outside, r)).sum();
        if total > FACTOR_ENUMERATION_LIMIT || work > FACTOR_ENUMERATION_LIMIT {
            return Err(Error::Unsupported("tableau too large for the factoring test".into()));
        }
        let project = |cols: &[usize]| -> usize {
            let mut points: HashSet<Vec<u8>> = HashSet::new();
            for row in &self.rows {
                let mut stack = vec![Vec::with_capacity(cols.len())];
                for &c in cols {
                    stack = stack
                        .into_iter()
                        .flat_map(|p: Vec<u8>| {
                            row[c].types().map(move |t| {
                                let mut q = p.clone();
                                q.push(t as u8);
                                q
                            })
                        })
                        .collect();
                }
                points.extend(stack);
            }
            points.len()
        };
        Ok(total == project(&inside) * project(&outside))
    }
}

impl fmt::Display for Tableau {
    /// One row per line, entries as `(bits)_site` with sites counted from 1.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, row) in self.rows.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            let cells: Vec<String> = row
                .iter()
                .zip(&self.columns)
                .map(|(b, c)| match c.location {
                    Location::Site(s) => format!("({})_{}", b.notation(self.k), s + 1),
                    Location::Star => format!("({})_*", b.notation(self.k)),
                })
                .collect();
            write!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// A tableau following the labels of the particle process. Labels whose
/// column has been pruned map to `None`; their variables are constant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedTableau {
    pub tableau: Tableau,
    labels: Vec<Option<usize>>,
}

impl RankedTableau {
    pub fn new(tableau: Tableau) -> Self {
        let mut ranked = Self { labels: (0..tableau.width()).map(Some).collect(), tableau };
        ranked.prune();
        ranked
    }

    /// Column of each particle label.
    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    fn prune(&mut self) {
        let removed = self.tableau.prune();
        self.forget(&removed);
    }

    fn forget(&mut self, removed: &[usize]) {
        if removed.is_empty() {
            return;
        }
        for slot in &mut self.labels {
            if let Some(c) = *slot {
                *slot = if removed.binary_search(&c).is_ok() {
                    None
                } else {
                    Some(c - removed.partition_point(|&r| r < c))
                };
            }
        }
    }

    fn column(&self, label: usize) -> Result<Option<usize>> {
        self.labels.get(label).copied().ok_or_else(|| Error::Contract(format!("unknown particle label {label}")))
    }
}

impl IndicatorDual for RankedTableau {
    fn birth(&mut self, parent: usize, level: TypeSet) -> Result<()> {
        match self.column(parent)? {
            Some(c) => {
                self.tableau.selection(c, level)?;
                for slot in self.labels.iter_mut().flatten() {
                    if *slot > c {
                        *slot += 1;
                    }
                }
                self.labels.push(Some(c + 1));
                self.prune();
            }
            None => self.labels.push(None),
        }
        Ok(())
    }

    fn coalesce(&mut self, survivor: usize, absorbed: usize) -> Result<()> {
        let a = self.column(survivor)?;
        let b = self.column(absorbed)?;
        self.labels.remove(absorbed);
        match (a, b) {
            (Some(x), Some(y)) => {
                let (low, high) = (x.min(y), x.max(y));
                self.tableau.coalesce(low, high)?;
                for slot in self.labels.iter_mut().flatten() {
                    if *slot > high {
                        *slot -= 1;
                    }
                }
                self.labels[survivor] = Some(low);
                self.prune();
            }
            (None, Some(y)) => self.labels[survivor] = Some(y),
            _ => {}
        }
        Ok(())
    }

    fn mutation_jump(&mut self, label: usize, from: usize, to: usize) -> Result<()> {
        if let Some(c) = self.column(label)? {
            self.tableau.mutation_jump(c, from, to)?;
            self.prune();
        }
        Ok(())
    }

    fn relocate(&mut self, label: usize, to: Location) -> Result<()> {
        if let Some(c) = self.column(label)? {
            self.tableau.migrate(c, to, false)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SetDualOptions {
    /// Reject migration into occupied sites that do not factor.
    pub strict_migration: bool,
    /// Merge rows after every event.
    pub simplify: bool,
    /// Stop as soon as the dual is trapped.
    pub stop_at_trap: bool,
    /// Abort when the row count exceeds this.
    pub max_rows: usize,
}

impl Default for SetDualOptions {
    fn default() -> Self {
        Self { strict_migration: false, simplify: true, stop_at_trap: false, max_rows: 1 << 14 }
    }
}

/// Outcome of one set-valued dual replica.
#[derive(Clone, Debug)]
pub struct SetDualRun {
    pub tableau: Tableau,
    /// Time and value of trapping, if it happened before the horizon.
    pub trap: Option<(f64, bool)>,
    /// First time a rank carried descent from two different clouds.
    pub collision: Option<f64>,
    /// Times at which an occupied site lost its last rank.
    pub site_resolutions: Vec<(usize, f64)>,
    pub events: u64,
    pub max_rows: usize,
}

fn occupied_sites(t: &Tableau) -> Vec<usize> {
    let mut sites: Vec<usize> = t.columns().iter().filter_map(|c| c.location.site()).collect();
    sites.sort_unstable();
    sites.dedup();
    sites
}

/// Runs the autonomous set-valued dual on the active ranks of `g0`:
/// selection at rate `s` per rank, coalescence at rate `d` per co-located
/// pair, migration at rate `c` per rank along the reversed kernel, and
/// set-valued mutation jumps.
pub fn simulate_set_dual<R: Rng + ?Sized>(
    g0: &Tableau,
    model: &Model,
    horizon: f64,
    rng: &mut R,
    options: &SetDualOptions,
) -> Result<SetDualRun> {
    if g0.k() != model.k() {
        return Err(Error::Contract("tableau and model disagree on the number of types".into()));
    }
    if g0.columns().iter().any(|c| c.location == Location::Star) {
        return Err(Error::Unsupported("the autonomous set-valued dual has no star site".into()));
    }
    if g0.columns().iter().any(|c| c.location.site().is_some_and(|s| s >= model.site_count())) {
        return Err(Error::Contract("tableau column outside the geography".into()));
    }
    let mut g = g0.clone();
    if options.simplify {
        g.simplify();
    } else {
        g.prune();
    }
    let table = SetJumpTable::from_types(&model.types, false);
    let decomposition = model.decomposition();
    let migration = if model.site_count() > 1 { model.migration() } else { 0.0 };
    let mut run = SetDualRun {
        tableau: g.clone(),
        trap: None,
        collision: None,
        site_resolutions: Vec::new(),
        events: 0,
        max_rows: g.len(),
    };
    if g.columns().iter().any(|c| c.cloud.count_ones() > 1) {
        run.collision = Some(0.0);
    }
    if let Some(v) = g.trap() {
        run.trap = Some((0.0, v));
        if options.stop_at_trap {
            run.tableau = g;
            return Ok(run);
        }
    }
    let mut occupied = occupied_sites(&g);
    let mut now = 0.0;
    loop {
        let width = g.width();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for a in 0..width {
            for b in a + 1..width {
                if g.columns()[a].location == g.columns()[b].location {
                    pairs.push((a, b));
                }
            }
        }
        let w = width as f64;
        let rates = [model.selection * w, model.resampling * pairs.len() as f64, migration * w, table.total() * w];
        let total: f64 = rates.iter().sum();
        if total <= 0.0 {
            break;
        }
        now += Exp::new(total).expect("positive rate").sample(rng);
        if now > horizon {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut kind = 3;
        for (i, r) in rates.iter().enumerate() {
            if u < *r {
                kind = i;
                break;
            }
            u -= r;
        }
        while rates[kind] == 0.0 {
            kind -= 1;
        }
        match kind {
            0 => {
                let rank = rng.random_range(0..width);
                let level = decomposition.level_sets()[decomposition.sample_level(rng)];
                g.selection(rank, level)?;
            }
            1 => {
                let (a, b) = pairs[rng.random_range(0..pairs.len())];
                g.coalesce(a, b)?;
                if run.collision.is_none() && g.columns()[a].cloud.count_ones() > 1 {
                    run.collision = Some(now);
                }
            }
            2 => {
                let rank = rng.random_range(0..width);
                let from = g.columns()[rank].location.site().expect("sites only");
                let to = model.kernel.sample_reversed_target(rng, from);
                g.migrate(rank, Location::Site(to), options.strict_migration)?;
            }
            _ => {
                let rank = rng.random_range(0..width);
                let (i, j) = table.sample(rng);
                g.mutation_jump(rank, i, j)?;
            }
        }
        if options.simplify {
            g.simplify();
        } else {
            g.prune();
        }
        run.events += 1;
        run.max_rows = run.max_rows.max(g.len());
        if g.len() > options.max_rows {
            return Err(Error::Aborted(format!("set-valued dual exceeded {} rows", options.max_rows)));
        }
        let now_occupied = occupied_sites(&g);
        for s in &occupied {
            if now_occupied.binary_search(s).is_err() {
                run.site_resolutions.push((*s, now));
            }
        }
        occupied = now_occupied;
        if run.trap.is_none() {
            if let Some(v) = g.trap() {
                run.trap = Some((now, v));
                if options.stop_at_trap {
                    break;
                }
            }
        }
    }
    run.tableau = g;
    Ok(run)
}

/// Continuous-time chain on `0..n` given by its outgoing rates.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteChain {
    transitions: Vec<Vec<(usize, f64)>>,
}

impl FiniteChain {
    pub fn new(transitions: Vec<Vec<(usize, f64)>>) -> Self {
        Self { transitions }
    }

    pub fn state_count(&self) -> usize {
        self.transitions.len()
    }

    pub fn transitions(&self, state: usize) -> &[(usize, f64)] {
        &self.transitions[state]
    }

    pub fn exit_rate(&self, state: usize) -> f64 {
        self.transitions[state].iter().map(|t| t.1).sum()
    }

    /// Runs from `start` until a state without exits; returns it and the
    /// hitting time, or `None` if `max_time` passes first.
    pub fn run_to_absorption<R: Rng + ?Sized>(
        &self,
        start: usize,
        max_time: f64,
        rng: &mut R,
    ) -> Option<(usize, f64)> {
        let mut state = start;
        let mut time = 0.0;
        loop {
            let rate = self.exit_rate(state);
            if rate <= 0.0 {
                return Some((state, time));
            }
            time += Exp::new(rate).expect("positive rate").sample(rng);
            if time > max_time {
                return None;
            }
            let mut u = rng.random::<f64>() * rate;
            let mut next = self.transitions[state].last().expect("nonempty").0;
            for &(s, r) in &self.transitions[state] {
                if u < r {
                    next = s;
                    break;
                }
                u -= r;
            }
            state = next;
        }
    }
}

/// An ordered tuple of disjoint, possibly empty blocks covering the types.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartitionChain {
    blocks: Vec<TypeSet>,
}

impl PartitionChain {
    pub fn new(blocks: Vec<TypeSet>, k: usize) -> Result<Self> {
        let mut seen = TypeSet::EMPTY;
        for b in &blocks {
            if !b.is_disjoint(seen) {
                return Err(Error::Validation("partition blocks must be disjoint".into()));
            }
            seen = seen.union(*b);
        }
        if seen != TypeSet::full(k) {
            return Err(Error::Validation("partition blocks must cover every type".into()));
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[TypeSet] {
        &self.blocks
    }

    /// Index of the only nonempty block, if there is just one.
    pub fn trap(&self) -> Option<usize> {
        let mut nonempty = self.blocks.iter().enumerate().filter(|(_, b)| !b.is_empty());
        match (nonempty.next(), nonempty.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }

    /// Moves: type `j` joins block `l` at rate `sum_{j' in B_l} rates[j][j']`.
    pub fn moves(&self, rates: &[Vec<f64>]) -> Vec<(PartitionChain, f64)> {
        let mut out = Vec::new();
        for (from, block) in self.blocks.iter().enumerate() {
            for j in block.types() {
                for (to, target) in self.blocks.iter().enumerate() {
                    if to == from {
                        continue;
                    }
                    let rate: f64 = target.types().map(|t| rates[j][t]).sum();
                    if rate > 0.0 {
                        let mut blocks = self.blocks.clone();
                        blocks[from] = blocks[from].without(j);
                        blocks[to] = blocks[to].with(j);
                        out.push((PartitionChain { blocks }, rate));
                    }
                }
            }
        }
        out
    }

    /// Samples the holding time and the next state; `None` at a trap or
    /// when nothing can move.
    pub fn step<R: Rng + ?Sized>(&self, rates: &[Vec<f64>], rng: &mut R) -> Option<(f64, PartitionChain)> {
        let moves = self.moves(rates);
        let total: f64 = moves.iter().map(|m| m.1).sum();
        if total <= 0.0 {
            return None;
        }
        let hold = Exp::new(total).expect("positive rate").sample(rng);
        let mut u = rng.random::<f64>() * total;
        for (state, r) in &moves {
            if u < *r {
                return Some((hold, state.clone()));
            }
            u -= r;
        }
        moves.last().map(|m| (hold, m.0.clone()))
    }
}

/// The partition chain enumerated over all assignments of types to blocks.
#[derive(Clone, Debug)]
pub struct PartitionChainModel {
    k: usize,
    block_count: usize,
    rates: Vec<Vec<f64>>,
    chain: FiniteChain,
}

impl PartitionChainModel {
    /// `rates[j][j']` is the mutation rate `j -> j'` (diagonal ignored).
    pub fn new(rates: Vec<Vec<f64>>, block_count: usize) -> Result<Self> {
        let k = rates.len();
        if k == 0 || block_count == 0 || rates.iter().any(|r| r.len() != k) {
            return Err(Error::Parameter("rates must be a nonempty square matrix and blocks >= 1".into()));
        }
        if rates.iter().enumerate().any(|(i, r)| r.iter().enumerate().any(|(j, v)| i != j && !(*v >= 0.0 && v.is_finite()))) {
            return Err(Error::Parameter("mutation rates must be finite and nonnegative".into()));
        }
        let states = (block_count as f64).powi(k as i32);
        if states > 1e6 {
            return Err(Error::Parameter(format!("{states} partition states is too many to enumerate")));
        }
        let mut rates = rates;
        for (i, row) in rates.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        let mut model = Self { k, block_count, rates, chain: FiniteChain::new(Vec::new()) };
        let transitions = (0..states as usize)
            .map(|idx| {
                let p = model.decode(idx);
                if p.trap().is_some() {
                    return Vec::new();
                }
                p.moves(&model.rates).into_iter().map(|(q, r)| (model.encode(&q), r)).collect()
            })
            .collect();
        model.chain = FiniteChain::new(transitions);
        Ok(model)
    }

    pub fn chain(&self) -> &FiniteChain {
        &self.chain
    }

    pub fn state_count(&self) -> usize {
        self.chain.state_count()
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.rates
    }

    pub fn encode(&self, p: &PartitionChain) -> usize {
        let mut idx = 0;
        for t in (0..self.k).rev() {
            let block = p.blocks.iter().position(|b| b.contains(t)).expect("blocks cover the types");
            idx = idx * self.block_count + block;
        }
        idx
    }

    pub fn decode(&self, mut idx: usize) -> PartitionChain {
        let mut blocks = vec![TypeSet::EMPTY; self.block_count];
        for t in 0..self.k {
            blocks[idx % self.block_count] = blocks[idx % self.block_count].with(t);
            idx /= self.block_count;
        }
        PartitionChain { blocks }
    }

    /// `h[b][state]`: probability of absorption in the trap with block `b`
    /// nonempty. States that cannot move and are not traps absorb nowhere.
    pub fn absorption_probabilities(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.state_count();
        let traps: Vec<Option<usize>> = (0..n).map(|s| self.decode(s).trap()).collect();
        let transient: Vec<usize> = (0..n).filter(|&s| traps[s].is_none() && self.chain.exit_rate(s) > 0.0).collect();
        let mut position = vec![usize::MAX; n];
        for (i, &s) in transient.iter().enumerate() {
            position[s] = i;
        }
        let m = transient.len();
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut b = DMatrix::<f64>::zeros(m, self.block_count);
        for (i, &s) in transient.iter().enumerate() {
            a[(i, i)] = self.chain.exit_rate(s);
            for &(t, r) in self.chain.transitions(s) {
                if let Some(block) = traps[t] {
                    b[(i, block)] += r;
                } else if position[t] != usize::MAX {
                    a[(i, position[t])] -= r;
                }
            }
        }
        let solution = if m > 0 {
            a.lu().solve(&b).ok_or_else(|| Error::Validation("absorption system is singular".into()))?
        } else {
            b
        };
        let mut h = vec![vec![0.0; n]; self.block_count];
        for s in 0..n {
            if let Some(block) = traps[s] {
                h[block][s] = 1.0;
            } else if position[s] != usize::MAX {
                for (block, row) in h.iter_mut().enumerate() {
                    row[s] = solution[(position[s], block)];
                }
            }
        }
        Ok(h)
    }

    /// The chain conditioned on absorption in trap `block`, started at `start`:
    /// rates `h(next) / h(current) q`.
    pub fn h_transform(&self, start: usize, block: usize, h: &[Vec<f64>]) -> Result<FiniteChain> {
        if block >= self.block_count {
            return Err(Error::Parameter(format!("trap block {block} out of range")));
        }
        let hb = &h[block];
        if !(hb[start] > 0.0) {
            return Err(Error::NullConditioning(format!(
                "absorption in block {block} has probability zero from state {start}"
            )));
        }
        let transitions = (0..self.state_count())
            .map(|s| {
                if hb[s] <= 0.0 {
                    return Vec::new();
                }
                self.chain
                    .transitions(s)
                    .iter()
                    .filter(|(t, _)| hb[*t] > 0.0)
                    .map(|&(t, r)| (t, r * hb[t] / hb[s]))
                    .collect()
            })
            .collect();
        Ok(FiniteChain::new(transitions))
    }
}

/// Draws the trap from the absorption law, then the path from the
/// corresponding h-transform.
#[derive(Clone, Debug)]
pub struct ConditionedMixture {
    weights: Vec<f64>,
    chains: Vec<Option<FiniteChain>>,
    start: usize,
}

impl ConditionedMixture {
    pub fn new(model: &PartitionChainModel, start: usize) -> Result<Self> {
        let h = model.absorption_probabilities()?;
        let weights: Vec<f64> = h.iter().map(|row| row[start]).collect();
        let chains = (0..weights.len())
            .map(|b| if weights[b] > 0.0 { model.h_transform(start, b, &h).map(Some) } else { Ok(None) })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { weights, chains, start })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Samples `(trap block, absorption time)`.
    pub fn sample<R: Rng + ?Sized>(&self, max_time: f64, rng: &mut R) -> Option<(usize, f64)> {
        let mut u: f64 = rng.random::<f64>() * self.weights.iter().sum::<f64>();
        let mut block = self.weights.iter().rposition(|w| *w > 0.0)?;
        for (b, w) in self.weights.iter().enumerate() {
            if *w > 0.0 && u < *w {
                block = b;
                break;
            }
            u -= w;
        }
        let chain = self.chains[block].as_ref()?;
        chain.run_to_absorption(self.start, max_time, rng).map(|(_, t)| (block, t))
    }
}

/// Solves `A h = b` for a dense system; exposed for small oracles.
pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let m = DMatrix::from_fn(n, n, |i, j| a[i][j]);
    let v = DVector::from_column_slice(b);
    m.lu().solve(&v).map(|x| x.iter().copied().collect()).ok_or_else(|| Error::Validation("singular system".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(s: &str) -> TypeSet {
        TypeSet::parse(s).unwrap()
    }

    fn grid(t: &Tableau) -> Vec<Vec<String>> {
        t.rows().iter().map(|r| r.iter().map(|b| b.notation(t.k())).collect()).collect()
    }

    fn site0() -> Location {
        Location::Site(0)
    }

    #[test]
    fn staircase_after_three_selections() {
        let mut t = Tableau::product(3, &[(site0(), set("110"))]).unwrap();
        for _ in 0..3 {
            t.selection(0, set("011")).unwrap();
        }
        assert_eq!(
            grid(&t),
            [
                ["010", "111", "111", "111"],
                ["100", "010", "111", "111"],
                ["100", "100", "010", "111"],
                ["100", "100", "100", "110"],
            ]
        );
        assert!(t.rows_disjoint());
        assert!(t.column_structure_holds());
    }

    #[test]
    fn coalescence_of_third_and_first_columns() {
        let mut t = Tableau::product(4, &[(site0(), set("1110"))]).unwrap();
        t.selection(0, set("0011")).unwrap();
        t.selection(0, set("0011")).unwrap();
        t.selection(2, set("0111")).unwrap();
        assert_eq!(
            grid(&t),
            [
                ["0010", "1111", "1111", "1111"],
                ["1100", "0010", "1111", "1111"],
                ["1100", "1100", "0110", "1111"],
                ["1100", "1100", "1000", "1110"],
            ]
        );
        t.coalesce(0, 2).unwrap();
        assert_eq!(
            grid(&t),
            [
                ["0010", "1111", "1111"],
                ["1100", "0010", "1111"],
                ["0100", "1100", "1111"],
                ["1000", "1100", "1110"],
            ]
        );
        assert!(t.rows_disjoint());
    }

    #[test]
    fn coalescence_rank_pairs() {
        let mut t = Tableau::product(4, &[(site0(), set("1110")), (site0(), set("1110"))]).unwrap();
        t.selection(1, set("0011")).unwrap();
        t.selection(0, set("0111")).unwrap();
        // columns: 0 (A at i), 1 (child of i), 2 (B at j), 3 (child of j)
        t.coalesce(0, 2).unwrap();
        let mut first: Vec<String> = t.rows().iter().map(|r| r[0].notation(4)).collect();
        first.sort();
        first.dedup();
        assert_eq!(first, ["0010", "0100", "1000"]);
    }

    #[test]
    fn selection_without_overlap_keeps_row_count() {
        let mut t = Tableau::product(2, &[(site0(), set("10"))]).unwrap();
        t.selection(0, set("01")).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t.selection(5, set("01")).is_err());
    }

    #[test]
    fn coalescence_needs_same_site() {
        let mut t = Tableau::product(2, &[(site0(), set("10")), (Location::Site(1), set("01"))]).unwrap();
        assert!(t.coalesce(0, 1).is_err());
        let mut u = Tableau::product(2, &[(site0(), set("10")), (site0(), set("01"))]).unwrap();
        u.coalesce(0, 1).unwrap();
        assert_eq!(u.trap(), Some(false));
    }

    #[test]
    fn full_column_is_pruned() {
        let mut t = Tableau::product(2, &[(site0(), set("10")), (site0(), set("11"))]).unwrap();
        assert_eq!(t.prune(), vec![1]);
        assert_eq!(t.width(), 1);
        let one = Tableau::product(2, &[(site0(), set("11"))]).unwrap();
        assert_eq!(one.trap(), Some(true));
    }

    #[test]
    fn simplify_merges_complementary_rows() {
        let mut t = Tableau::product(2, &[(site0(), set("01"))]).unwrap();
        t.selection(0, set("01")).unwrap();
        t.mutation_jump(1, 1, 0).unwrap();
        t.simplify();
        assert!(t.is_pruned());
        assert!(t.rows_disjoint());
    }

    #[test]
    fn factoring_test() {
        let product = Tableau::product(2, &[(site0(), set("10")), (Location::Site(1), set("01"))]).unwrap();
        assert!(product.factors(&[0]).unwrap());
        let columns = vec![Column::at(site0()), Column::at(Location::Site(1))];
        let diagonal =
            Tableau::new(2, columns, vec![vec![set("10"), set("10")], vec![set("01"), set("01")]]).unwrap();
        assert!(!diagonal.factors(&[0]).unwrap());
        let mut moving = diagonal.clone();
        assert!(moving.clone().migrate(0, Location::Site(2), true).is_ok());
        assert!(moving.migrate(0, Location::Site(1), true).is_err());
        let mut three = Tableau::new(
            2,
            vec![Column::at(site0()), Column::at(Location::Site(1)), Column::at(Location::Site(1))],
            vec![vec![set("10"), set("10"), set("01")], vec![set("01"), set("01"), set("01")]],
        )
        .unwrap();
        assert!(matches!(three.migrate(0, Location::Site(1), true), Err(Error::Unsupported(_))));
        assert!(three.migrate(0, Location::Site(1), false).is_ok());
    }

    #[test]
    fn two_type_absorption() {
        let rates = vec![vec![0.0, 0.7], vec![0.3, 0.0]];
        let model = PartitionChainModel::new(rates, 2).unwrap();
        let start = PartitionChain::new(vec![set("10"), set("01")], 2).unwrap();
        let h = model.absorption_probabilities().unwrap();
        let s = model.encode(&start);
        // type 2 joins block 1 at rate m_21 = 0.3
        assert!((h[0][s] - 0.3).abs() < 1e-12);
        assert!((h[1][s] - 0.7).abs() < 1e-12);
        assert_eq!(model.state_count(), 4);
    }

    #[test]
    fn null_conditioning_rejected() {
        let rates = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        let model = PartitionChainModel::new(rates, 2).unwrap();
        let start = model.encode(&PartitionChain::new(vec![set("10"), set("01")], 2).unwrap());
        let h = model.absorption_probabilities().unwrap();
        assert!(matches!(model.h_transform(start, 0, &h), Err(Error::NullConditioning(_))));
        assert!(model.h_transform(start, 1, &h).is_ok());
    }
}
