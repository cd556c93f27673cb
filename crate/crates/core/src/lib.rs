//! Radial finite-volume toolkit for the critical nonlocal Keller-Segel
//! equation `u_t = Δu^m − ∇·(u∇φ)` with Riesz attraction
//! `φ = c_{d,s} |x|^{-(d-2s)} * u` and `m = 2 − 2s/d`.

pub mod energy;
pub mod error;
pub mod extremal;
pub mod field;
pub mod model;
pub mod riesz;
pub mod solver;
pub mod special;

pub use error::{Error, Result};
pub use field::{DensityField, RadialGrid};
pub use model::{DerivedConstants, ModelParams};
pub use riesz::RieszKernel;
