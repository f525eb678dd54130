//! Random perforated domains in the Darcy regime.
//!
//! Holes are balls `B_{eps^alpha rho_z}(eps z)` around the points `z` of a
//! marked Poisson process. The crate samples them, measures their geometry,
//! builds the capacity correctors and flux measures that carry the Darcy
//! constant `k = 1/(4 pi lambda E[rho])`, and solves the Poisson problem on
//! the perforated domain by finite differences.

pub mod clusters;
pub mod correctors;
pub mod domain;
pub mod fdsolver;
pub mod geometry;
pub mod harness;
pub mod lattice;
pub mod measures;
pub mod pointprocess;
pub mod quadrature;
pub mod rng;
pub mod spatial;
pub mod stats;
