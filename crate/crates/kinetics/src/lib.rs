//! Kinetic theory of an electron weakly coupled to a phonon bath: collision
//! kernels, a Monte Carlo Boltzmann solver with its Dyson-series oracle,
//! Wigner transforms, a truncated Fock-space reference simulation, and the
//! pairing combinatorics behind the diagrammatic expansion.

pub mod boltzmann;
pub mod diagrams;
pub mod geometry;
pub mod kernels;
pub mod lattice;
pub mod model;
pub mod quadrature;
pub mod quantum;
pub mod rng;
pub mod stats;
pub mod vecmath;
pub mod wigner;

pub use model::{Model, ModelConfig};
