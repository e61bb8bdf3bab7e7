//! Reconstruction toolkit for cluster surface-mass-density (convergence) maps.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] — square angular grids and the field types that live on them,
//!   plus bilinear sampling/splatting used throughout.
//! * [`raster`] — the `F32R` binary raster format (scalar / vector /
//!   photometry payloads).
//! * [`cosmo`] — flat ΛCDM background, angular-diameter distances, critical
//!   surface density and convergence rescaling between source planes.
//! * [`lens`] — forward lensing operators (deflection, shear, Jacobian,
//!   ray tracing), their adjoints, Kaiser–Squires inversion and analytic
//!   reference lenses.
//! * [`mock`] — synthetic particle clouds, line-of-sight projections,
//!   k-NN density estimation, photometry binning and Sérsic sources.
//! * [`observe`] — simulated observations: source redshifts, multiple-image
//!   finding, strong-lens systems and weak-shear catalogs.
//! * [`likelihood`] — strong/weak lensing data terms with analytic
//!   gradients and the scattered-shear RBF interpolant.
//! * [`sampler`] — annealed posterior sampling (noise schedule, score
//!   priors, the decoupled-annealing loop) and the external score-provider
//!   wire protocol.
//! * [`evaluate`] — image metrics, held-out validation, uncertainty
//!   calibration and the light-traces-mass baseline.

pub mod cosmo;
pub mod digest;
pub mod evaluate;
pub mod grid;
pub mod lens;
pub mod likelihood;
pub mod mock;
pub mod numeric;
pub mod observe;
pub mod raster;
pub mod rng;
pub mod sampler;
