//! Multiscale kinetic image segmentation.
//!
//! An image is treated as a system of interacting particles: each pixel
//! carries a spatial position in `Ω = [-1,1]²` and a feature vector in
//! `[0,1]^d` (grayscale `d = 1`, RGB `d = 3`). Three coupled mechanisms act
//! on the ensemble at separated time scales:
//!
//! * fast spatial aggregation/diffusion between feature-similar pixels
//!   (bounded confidence window `Δ₂`), simulated by a Nanbu-type DSMC scheme
//!   and reduced analytically to a Gaussian quasi-equilibrium parametrized by
//!   the conserved fields `ρ(c)` and `𝓕(c)`;
//! * feature transport toward the local average feature (radius `Δ₁`);
//! * slow binarization down a double-well potential with maximum at `c_max`.
//!
//! The closed first-order system for `(ρ, 𝓕)` is evolved in feature space by
//! a Rusanov finite-volume solver ([`macrosolver`]), and its asymptotic
//! feature distribution is fitted to a ground-truth mask distribution by
//! consensus-based optimization ([`cbo`]). The full image pipeline (shape
//! synthesis, noise injection, optimization, particle-level mask generation)
//! lives in [`pipeline`].

pub mod cbo;
pub mod ensemble;
pub mod equilibrium;
pub mod error;
pub mod exec;
pub mod grid;
pub mod image_field;
pub mod io;
pub mod macrosolver;
pub mod microsim;
pub mod neighbor;
pub mod noise;
pub mod params;
pub mod pipeline;
pub mod potential;
pub mod rng;

pub use error::KinsegError;

/// Convenience result alias used across the crate.
pub type Result<T> = std::result::Result<T, KinsegError>;
