//! Reconstruction of volumetric heat sources from temperature and velocity
//! fields governed by the 1D transient advection-diffusion equation.
//!
//! The pipeline is built from six pieces:
//!
//! * [`basis`] — Fourier and branch (Steklov) mode families, projection and
//!   reconstruction of fields, truncation-order selection.
//! * [`model`] — reduced state-space form of the heat equation and its
//!   semi-implicit time integrator.
//! * [`reference`] — an independent finite-volume solver used to manufacture
//!   synthetic "experimental" data, plus seeded Gaussian noise injection.
//! * [`cgm`] — the adjoint-state conjugate gradient inversion with exact line
//!   search, discrepancy stopping and a Tikhonov-penalized variant.
//! * [`tsvd`] — truncated SVD filtering of the gradient trajectory, the
//!   temporal regularization stage of the inversion.
//! * [`experiment`] — configuration parsing, experiment orchestration over
//!   (noise, seed, regularizer) cells, and CSV report emission.
//!
//! All numerics are generic over the scalar type through [`scalar::Scalar`];
//! the aliases below fix the default `f64` precision used by the CLI and the
//! test suites.

pub mod basis;
pub mod cgm;
pub mod error;
pub mod experiment;
pub mod field;
pub mod grid;
pub mod model;
pub mod reference;
pub mod scalar;
pub mod tsvd;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default precision for the shipped CLI and test suites.
pub type Real = f64;

pub type Grid1D64 = grid::Grid1D<Real>;
pub type TimeGrid64 = grid::TimeGrid<Real>;
pub type Field64 = field::Field<Real>;
pub type SpectralBasis64 = basis::SpectralBasis<Real>;
pub type Trajectory64 = model::Trajectory<Real>;
pub type ModelMatrices64 = model::ModelMatrices<Real>;
pub type TestCase64 = reference::TestCase<Real>;
pub type InversionReport64 = cgm::InversionReport<Real>;
