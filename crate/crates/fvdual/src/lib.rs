//! Interacting Fleming-Viot populations with migration, selection, mutation
//! and resampling, together with a family of dual processes whose
//! expectations reproduce the forward moments.

pub mod error;
pub mod forward;
pub mod function;
pub mod geometry;
pub mod harness;
pub mod markov;
pub mod model;
pub mod particle;
pub mod refined;
pub mod tableau;

pub use error::{Error, Result};
pub use model::{Model, PopulationState};
