//! Laboratory for affine random walks on the torus `T^d` and on `F_p^d`.
//!
//! The crate simulates walks `x -> γ(ω)x + u(ω)` exactly (rational
//! arithmetic) and statistically (seeded Monte Carlo), measures Fourier
//! coefficient decay, detects and certifies finite orbits of bounded
//! height, and property-checks the quantitative inequalities that are
//! testable at desk scale.
//!
//! Module map:
//! - [`algebra`]: torus points, integer matrices, affine maps, norms.
//! - [`walk`]: walk specifications, sampling, exact measure evolution,
//!   Lyapunov exponent estimation.
//! - [`orbit`]: finite-orbit detection, heights, periodic-datum search,
//!   integer-linear approximation, fixed points, exact concentration
//!   probabilities.
//! - [`spectral`]: Fourier coefficients, Weyl scans, decay/trapping
//!   reports, convolution inequality checks, granule detection.
//! - [`margulis`]: alpha-energy, ball masses, contraction fitting, the
//!   drift inequality check and the checkerboard decomposition.
//! - [`fp`]: the mod-p lab: dense distribution evolution, DFT, orbit
//!   census, regular-representation spectral gap, decay dichotomy.

pub mod algebra;
pub mod fp;
pub mod margulis;
pub mod orbit;
pub mod spectral;
pub mod walk;

pub use algebra::{AffineMap, IntMatrix, Rat, TorusPoint, Word};
pub use walk::{EmpiricalSample, FiniteMeasure, WalkSpec};
