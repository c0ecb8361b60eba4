use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FitnessDecomposition, MigrationKernel, TypeSpace};

/// Parameters shared by the forward process and all duals.
#[derive(Clone, Debug)]
pub struct Model {
    pub types: TypeSpace,
    pub kernel: MigrationKernel,
    /// Selection rate `s`.
    pub selection: f64,
    /// Resampling rate `d`; dual lineages coalesce at rate `d` per pair.
    pub resampling: f64,
    decomposition: FitnessDecomposition,
}

impl Model {
    pub fn new(types: TypeSpace, kernel: MigrationKernel, selection: f64, resampling: f64) -> Result<Self> {
        for (name, v) in [("selection", selection), ("resampling", resampling)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} rate {v} must be finite and >= 0")));
            }
        }
        let decomposition = FitnessDecomposition::new(types.fitness())?;
        Ok(Self { types, kernel, selection, resampling, decomposition })
    }

    pub fn decomposition(&self) -> &FitnessDecomposition {
        &self.decomposition
    }

    pub fn k(&self) -> usize {
        self.types.k()
    }

    pub fn site_count(&self) -> usize {
        self.kernel.site_count()
    }

    pub fn migration(&self) -> f64 {
        self.kernel.rate()
    }
}

/// Per-site type frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationState {
    sites: Vec<Vec<f64>>,
}

impl PopulationState {
    pub fn new(sites: Vec<Vec<f64>>) -> Result<Self> {
        let k = sites.first().map_or(0, Vec::len);
        for (i, x) in sites.iter().enumerate() {
            if x.len() != k || x.iter().any(|p| !(*p >= -1e-12)) || (x.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("site {i} is not a probability vector")));
            }
        }
        if sites.is_empty() {
            return Err(Error::Validation("population state needs at least one site".into()));
        }
        Ok(Self { sites })
    }

    /// Same vector at every site.
    pub fn homogeneous(x: Vec<f64>, site_count: usize) -> Result<Self> {
        Self::new(vec![x; site_count])
    }

    pub fn site(&self, i: usize) -> &[f64] {
        &self.sites[i]
    }

    pub fn sites(&self) -> &[Vec<f64>] {
        &self.sites
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    pub fn k(&self) -> usize {
        self.sites[0].len()
    }
}
