//! Simulation and state-estimation toolkit for convective drying of porous
//! particles: a finite-volume solver for the coupled moisture/heat transport
//! equations, proper-orthogonal-decomposition model reduction, a Galerkin
//! reduced-order model, empirical observability Gramians, and an extended
//! Kalman filter operating on the reduced coordinates.

pub mod ekf;
pub mod error;
pub mod fvm;
pub mod gramian;
pub mod grid;
pub mod material;
pub mod ode;
pub mod pod;
pub mod rom;
pub mod state;

pub use error::{CoreError, Result};
