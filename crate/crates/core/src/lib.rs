//! Markov chain Monte Carlo samplers whose diffusion matrix is modulated
//! along a one-dimensional collective variable, together with a dimer in a
//! WCA solvent as test system, thermodynamic integration for reference free
//! energies, and a transition-time benchmark harness.

pub mod diffusion;
pub mod error;
pub mod harness;
pub mod kinetic;
pub mod latent;
pub mod linalg;
pub mod model;
pub mod overdamped;
pub mod rng;
pub mod ti;

pub use error::{Error, Result};
