//! The dual particle process: located partition elements that coalesce,
//! migrate along the reversed kernel, give birth through selection and,
//! optionally, jump to the absorbing star site.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MigrationKernel;
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Location {
    Site(usize),
    /// Absorbing auxiliary site carrying the state-independent mutation part.
    Star,
}

impl Location {
    pub fn site(self) -> Option<usize> {
        match self {
            Location::Site(s) => Some(s),
            Location::Star => None,
        }
    }
}

/// A partition element: the individuals it contains and its location.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Element {
    members: Vec<u32>,
    location: Location,
}

impl Element {
    /// Individuals (1-based, increasing).
    pub fn members(&self) -> &[u32] {
        &self.members
    }

    /// The element's index: its smallest individual.
    pub fn index(&self) -> u32 {
        self.members[0]
    }

    pub fn location(&self) -> Location {
        self.location
    }
}

/// Ordered individuals grouped into an ordered partition.
///
/// Elements are kept in increasing order of their index; the position of an
/// element in that order is its label (0-based here, printed 1-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualParticleState {
    individual_count: u32,
    elements: Vec<Element>,
}

/// Rates driving the particle process.
#[derive(Clone, Copy, Debug)]
pub struct EtaDynamics<'a> {
    pub kernel: &'a MigrationKernel,
    /// Per co-located unordered pair.
    pub coalescence: f64,
    /// Per element, through the reversed kernel.
    pub migration: f64,
    /// Per element.
    pub birth: f64,
    /// Per non-star element; zero when the star extension is off.
    pub star: f64,
}

impl<'a> EtaDynamics<'a> {
    pub fn from_model(model: &'a Model, star: bool) -> Self {
        Self {
            kernel: &model.kernel,
            coalescence: model.resampling,
            migration: model.migration(),
            birth: model.selection,
            star: if star { model.types.star_rate() } else { 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    /// `absorbed` merges into `survivor`; `survivor < absorbed`.
    Coalescence { survivor: usize, absorbed: usize },
    Migration { element: usize, from: usize, to: usize },
    /// The newborn forms a singleton element labelled `child = |pi| - 1`.
    Birth { parent: usize, child: usize },
    StarJump { element: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualEvent {
    pub time: f64,
    pub kind: EventKind,
}

impl fmt::Display for DualEvent {
    /// One line of the replay format: `time kind payload` with 1-based labels.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            EventKind::Coalescence { survivor, absorbed } => {
                write!(f, "{:.12e} coalescence {} {}", self.time, survivor + 1, absorbed + 1)
            }
            EventKind::Migration { element, from, to } => {
                write!(f, "{:.12e} migration {} {} {}", self.time, element + 1, from, to)
            }
            EventKind::Birth { parent, child } => write!(f, "{:.12e} birth {} {}", self.time, parent + 1, child + 1),
            EventKind::StarJump { element } => write!(f, "{:.12e} star {}", self.time, element + 1),
        }
    }
}

impl DualEvent {
    /// Parses a line written by `Display`.
    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("malformed event record {line:?}"));
        let parts: Vec<&str> = line.split_whitespace().collect();
        let time: f64 = parts.first().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let num = |i: usize| -> Result<usize> { parts.get(i).and_then(|v| v.parse().ok()).ok_or_else(bad) };
        let kind = match parts.get(1).copied() {
            Some("coalescence") => EventKind::Coalescence { survivor: num(2)? - 1, absorbed: num(3)? - 1 },
            Some("migration") => EventKind::Migration { element: num(2)? - 1, from: num(3)?, to: num(4)? },
            Some("birth") => EventKind::Birth { parent: num(2)? - 1, child: num(3)? - 1 },
            Some("star") => EventKind::StarJump { element: num(2)? - 1 },
            _ => return Err(bad()),
        };
        Ok(Self { time, kind })
    }
}

/// Result of one scheduling attempt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Step {
    Event(DualEvent),
    /// Total rate is zero; nothing will ever happen.
    Quiescent,
    /// Every element sits at the star site.
    Absorbed,
    /// The next event would fall after the horizon.
    Beyond,
}

impl DualParticleState {
    /// Singletons `{1}, .., {n}` at the given locations.
    pub fn new(locations: &[Location]) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::Parameter("the dual needs at least one individual".into()));
        }
        let elements = locations
            .iter()
            .enumerate()
            .map(|(i, &location)| Element { members: vec![i as u32 + 1], location })
            .collect();
        Ok(Self { individual_count: locations.len() as u32, elements })
    }

    pub fn at_sites(sites: &[usize]) -> Result<Self> {
        Self::new(&sites.iter().map(|&s| Location::Site(s)).collect::<Vec<_>>())
    }

    pub fn individual_count(&self) -> u32 {
        self.individual_count
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn locations(&self) -> Vec<Location> {
        self.elements.iter().map(|e| e.location).collect()
    }

    fn colocated_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (label, e) in self.elements.iter().enumerate() {
            if let Location::Site(s) = e.location {
                match groups.iter_mut().find(|(site, _)| *site == s) {
                    Some((_, g)) => g.push(label),
                    None => groups.push((s, vec![label])),
                }
            }
        }
        groups.into_iter().map(|(_, g)| g).collect()
    }

    /// Number of co-located unordered pairs.
    pub fn colocated_pairs(&self) -> usize {
        self.colocated_groups().iter().map(|g| g.len() * (g.len() - 1) / 2).sum()
    }

    /// Total event rate in the current state.
    pub fn total_rate(&self, dynamics: &EtaDynamics) -> f64 {
        let active = self.elements.iter().filter(|e| e.location != Location::Star).count() as f64;
        dynamics.coalescence * self.colocated_pairs() as f64
            + (dynamics.migration + dynamics.birth + dynamics.star) * active
    }

    /// Samples and applies the next event, unless it falls after `horizon`.
    pub fn step_until<R: Rng + ?Sized>(
        &mut self,
        dynamics: &EtaDynamics,
        now: f64,
        horizon: f64,
        rng: &mut R,
    ) -> Step {
        let groups = self.colocated_groups();
        let pairs: usize = groups.iter().map(|g| g.len() * (g.len() - 1) / 2).sum();
        let active: Vec<usize> = (0..self.elements.len())
            .filter(|&l| self.elements[l].location != Location::Star)
            .collect();
        let a = active.len() as f64;
        let rates = [
            dynamics.coalescence * pairs as f64,
            dynamics.migration * a,
            dynamics.birth * a,
            dynamics.star * a,
        ];
        let total: f64 = rates.iter().sum();
        if total <= 0.0 {
            return if active.is_empty() { Step::Absorbed } else { Step::Quiescent };
        }
        let time = now + Exp::new(total).expect("positive rate").sample(rng);
        if time > horizon {
            return Step::Beyond;
        }
        let mut u = rng.random::<f64>() * total;
        let mut category = 3;
        for (i, r) in rates.iter().enumerate() {
            if u < *r {
                category = i;
                break;
            }
            u -= r;
        }
        while rates[category] == 0.0 {
            category -= 1;
        }
        let kind = match category {
            0 => {
                let mut r = rng.random_range(0..pairs);
                let mut chosen = (0, 0);
                'outer: for g in &groups {
                    for i in 0..g.len() {
                        for j in i + 1..g.len() {
                            if r == 0 {
                                chosen = (g[i], g[j]);
                                break 'outer;
                            }
                            r -= 1;
                        }
                    }
                }
                self.coalesce(chosen.0, chosen.1);
                EventKind::Coalescence { survivor: chosen.0, absorbed: chosen.1 }
            }
            1 => {
                let element = active[rng.random_range(0..active.len())];
                let from = self.elements[element].location.site().expect("active element");
                let to = dynamics.kernel.sample_reversed_target(rng, from);
                self.elements[element].location = Location::Site(to);
                EventKind::Migration { element, from, to }
            }
            2 => {
                let parent = active[rng.random_range(0..active.len())];
                let child = self.birth(parent);
                EventKind::Birth { parent, child }
            }
            _ => {
                let element = active[rng.random_range(0..active.len())];
                self.elements[element].location = Location::Star;
                EventKind::StarJump { element }
            }
        };
        Step::Event(DualEvent { time, kind })
    }

    /// Samples and applies the next event with no horizon.
    pub fn step<R: Rng + ?Sized>(&mut self, dynamics: &EtaDynamics, now: f64, rng: &mut R) -> Step {
        self.step_until(dynamics, now, f64::INFINITY, rng)
    }

    fn coalesce(&mut self, survivor: usize, absorbed: usize) {
        let gone = self.elements.remove(absorbed);
        let keep = &mut self.elements[survivor].members;
        keep.extend(gone.members);
        keep.sort_unstable();
    }

    fn birth(&mut self, parent: usize) -> usize {
        self.individual_count += 1;
        let location = self.elements[parent].location;
        self.elements.push(Element { members: vec![self.individual_count], location });
        self.elements.len() - 1
    }

    /// Applies a logged event (replay).
    pub fn apply(&mut self, kind: &EventKind) -> Result<()> {
        let n = self.elements.len();
        match *kind {
            EventKind::Coalescence { survivor, absorbed } => {
                if survivor >= absorbed || absorbed >= n {
                    return Err(Error::Contract(format!("bad coalescence labels ({survivor}, {absorbed})")));
                }
                self.coalesce(survivor, absorbed);
            }
            EventKind::Migration { element, to, .. } => {
                if element >= n {
                    return Err(Error::Contract(format!("bad migration label {element}")));
                }
                self.elements[element].location = Location::Site(to);
            }
            EventKind::Birth { parent, .. } => {
                if parent >= n {
                    return Err(Error::Contract(format!("bad birth label {parent}")));
                }
                self.birth(parent);
            }
            EventKind::StarJump { element } => {
                if element >= n {
                    return Err(Error::Contract(format!("bad star label {element}")));
                }
                self.elements[element].location = Location::Star;
            }
        }
        Ok(())
    }

    /// Checks disjointness, coverage, min-indexing and ordering.
    pub fn check_partition(&self) -> Result<()> {
        let mut seen = vec![false; self.individual_count as usize + 1];
        let mut last_index = 0;
        for e in &self.elements {
            if e.members.is_empty() || e.members.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract("element members not strictly increasing".into()));
            }
            if e.index() <= last_index {
                return Err(Error::Contract("elements not ordered by index".into()));
            }
            last_index = e.index();
            for &m in &e.members {
                if m == 0 || m > self.individual_count || seen[m as usize] {
                    return Err(Error::Contract(format!("individual {m} missing or repeated")));
                }
                seen[m as usize] = true;
            }
        }
        if seen.iter().skip(1).any(|s| !s) {
            return Err(Error::Contract("partition does not cover all individuals".into()));
        }
        Ok(())
    }
}

/// Runs the particle process up to `horizon` and returns the final state and
/// the event log.
pub fn simulate_eta<R: Rng + ?Sized>(
    state: &DualParticleState,
    dynamics: &EtaDynamics,
    horizon: f64,
    rng: &mut R,
) -> (DualParticleState, Vec<DualEvent>) {
    let mut state = state.clone();
    let mut log = Vec::new();
    let mut now = 0.0;
    while let Step::Event(ev) = state.step_until(dynamics, now, horizon, rng) {
        now = ev.time;
        log.push(ev);
    }
    (state, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dynamics(kernel: &MigrationKernel, d: f64, c: f64, s: f64, star: f64) -> EtaDynamics<'_> {
        EtaDynamics { kernel, coalescence: d, migration: c, birth: s, star }
    }

    #[test]
    fn init_examples() {
        assert!(DualParticleState::at_sites(&[]).is_err());
        let one = DualParticleState::at_sites(&[0]).unwrap();
        assert_eq!(one.len(), 1);
        let three = DualParticleState::at_sites(&[4, 4, 7]).unwrap();
        assert_eq!(three.locations(), vec![Location::Site(4), Location::Site(4), Location::Site(7)]);
        assert_eq!(three.colocated_pairs(), 1);
        let kernel = MigrationKernel::single();
        let two = DualParticleState::at_sites(&[0, 0]).unwrap();
        assert_eq!(two.total_rate(&dynamics(&kernel, 1.5, 0.0, 0.0, 0.0)), 1.5);
    }

    #[test]
    fn lone_element_is_quiescent() {
        let kernel = MigrationKernel::single();
        let mut state = DualParticleState::at_sites(&[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(state.step(&dynamics(&kernel, 1.0, 0.0, 0.0, 0.0), 0.0, &mut rng), Step::Quiescent);
    }

    #[test]
    fn star_absorption_sentinel() {
        let kernel = MigrationKernel::single();
        let mut state = DualParticleState::new(&[Location::Star, Location::Star]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(state.step(&dynamics(&kernel, 1.0, 0.0, 0.0, 1.0), 0.0, &mut rng), Step::Absorbed);
    }

    #[test]
    fn coalescence_merges_into_smaller_label() {
        let kernel = MigrationKernel::single();
        let mut state = DualParticleState::at_sites(&[0, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        match state.step(&dynamics(&kernel, 1.0, 0.0, 0.0, 0.0), 0.0, &mut rng) {
            Step::Event(ev) => assert_eq!(ev.kind, EventKind::Coalescence { survivor: 0, absorbed: 1 }),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(state.elements()[0].members(), &[1, 2]);
    }

    #[test]
    fn horizon_zero_leaves_state() {
        let kernel = MigrationKernel::single();
        let start = DualParticleState::at_sites(&[0, 0, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (end, log) = simulate_eta(&start, &dynamics(&kernel, 1.0, 0.0, 1.0, 0.0), 0.0, &mut rng);
        assert_eq!(end, start);
        assert!(log.is_empty());
    }

    #[test]
    fn log_lines_round_trip() {
        let kernel = MigrationKernel::new(1.0, crate::geometry::Geography::Island { sites: 3 }).unwrap();
        let start = DualParticleState::at_sites(&[0, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (end, log) = simulate_eta(&start, &dynamics(&kernel, 1.0, 1.0, 0.5, 0.0), 2.0, &mut rng);
        let mut replay = start.clone();
        for ev in &log {
            let parsed = DualEvent::parse_line(&ev.to_string()).unwrap();
            assert_eq!(parsed.kind, ev.kind);
            replay.apply(&parsed.kind).unwrap();
        }
        assert_eq!(replay, end);
    }
}
