//! Numerical laboratory for Hamiltonian linear differential systems
//! (𝔰𝔭(2ℓ,ℝ)-valued cocycles) over suspension flows of hyperbolic base maps.

pub mod base;
pub mod cli;
pub mod cocycle;
pub mod error;
pub mod holonomy;
pub mod perturbation;
pub mod spectrum;
pub mod symplectic;

pub use error::{Error, Result};
