//! Numerical laboratory for the radial focusing cubic Klein-Gordon equation
//! `u_tt - Delta u + u = u^3` in three space dimensions.
//!
//! The crate computes the ground state `Q` and the spectrum of its
//! linearization, evaluates the energy-type functionals used to organise the
//! dynamics near `+-Q`, evolves radial data with a symplectic split-step
//! scheme, and classifies trajectories by their fate in both time directions.

pub mod dst;
pub mod error;
pub mod evolution;
pub mod functionals;
pub mod ground_state;
pub mod lab;
pub mod linearized;
pub mod radial;
pub mod tridiag;

pub use error::{Error, Result};
pub use radial::{RadialField, RadialGrid, State};
