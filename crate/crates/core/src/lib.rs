//! Numerical laboratory for Laughlin-type states and their perturbations.
//!
//! - [`model`]: plasma parameters, configurations, quasi-holes, potentials
//!   and the effective Hamilton functions.
//! - [`sampler`]: Metropolis sampling of `|Psi_F|^2`, densities,
//!   incompressibility, quasi-hole deficits, trial energies.
//! - [`coulomb`]: ground states of the cleaned Coulomb energy, disk counts
//!   and exclusion audits.
//! - [`screening`]: screening regions by divisible sandpile, their
//!   potential, and support bounds.
//! - [`bathtub`]: capped-density bathtub and flocking energies, and the
//!   quasi-hole trial-energy comparison.
//! - [`ed`]: exact diagonalization of pseudo-potential Hamiltonians.
//! - [`cli`]: the command line front end.

#[cfg(test)]
#[macro_use]
mod test_util;

pub mod error;
pub mod grid;
pub mod bathtub;
pub mod cli;
pub mod coulomb;
pub mod ed;
pub mod model;
pub mod sampler;
pub mod screening;

pub use error::{LabError, Result};
pub use grid::Grid;
pub use model::{
    CorrelationFactor, PlasmaParams, Point, PointConfiguration, PotentialSpec, QuasiHole, QuasiHoleSet,
    Statistics,
};
