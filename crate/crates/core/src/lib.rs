//! Particle simulation of MCMC dynamics viewed as flows on the Wasserstein
//! space.
//!
//! * [`targets`]: target densities and a stochastic-gradient wrapper.
//! * [`recipe`]: `(D, Q)` dynamics, their drift fields and the generator.
//! * [`smoothing`]: RBF kernels and the Blob score estimate.
//! * [`samplers`]: Blob, SGHMC, pSGHMC-det and pSGHMC-fGH steppers.
//! * [`grid_oracle`]: 2-D density evolution used to check the drift identities.
//! * [`diagnostics`]: MMD, exact W2 and moment summaries.
//! * [`config`], [`runner`], [`validation`]: the command-line front end.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod grid_oracle;
pub mod linalg;
pub mod recipe;
pub mod rng;
pub mod runner;
pub mod samplers;
pub mod smoothing;
pub mod targets;
pub mod validation;

pub use error::{Error, Result};
