//! Semiclassical spectral toolkit for 4-D magnetic Schroedinger operators
//!
//! The central object is the operator
//!
//! ```text
//!     A = 1/2 ( sum_{jk} (h D_j - mu V_j) g^{jk} (h D_k - mu V_k) - V ),   D_j = -i d/dx_j,
//! ```
//!
//! on R^4 (or a 2-D block of it), with a smooth SPD metric `g^{jk}`, a magnetic
//! gauge `(V_1..V_4)`, a positive scalar potential `V`, and semiclassical
//! parameters `mu` (field strength) and `h` (Planck scale), `1 <= mu <= c/h`.
//! The momenta are h-quantized: `P_j = h D_j - mu V_j`, so a constant field of
//! intensity `f` produces Landau levels spaced by `2 mu h f`.
//!
//! What lives where:
//!
//! * [`fields`]: concrete field families (metric / gauge / potential) with
//!   analytic derivatives, domains (boxes and tori), semiclassical parameters.
//! * [`field_geometry`]: pointwise invariants of the magnetic intensity matrix
//!   `M = g F` (intensities f1 >= f2), microhyperbolicity margins, resonance
//!   scans, Hessian rank checks, measure-growth estimates, scaling lengths.
//! * [`weyl_laws`]: classical and magnetic Weyl eigenvalue-density expressions
//!   and their integration over domains.
//! * [`discrete_operator`]: gauge-covariant lattice discretization (Peierls
//!   link phases), Dirichlet boxes and flux-quantized tori, separable splits.
//! * [`spectral_count`]: eigenvalue counting below a threshold by dense
//!   eigendecomposition, LDL^H inertia, kernel-polynomial (KPM) stochastic
//!   traces, Lanczos spectral bounds, and separable convolution.
//! * [`classical_dynamics`]: the classical Hamiltonian flow, an adaptive
//!   Runge-Kutta 7(8) integrator, guiding-center extraction and drift reports.
//! * [`experiments`]: reproducible (mu, h) sweeps comparing lattice counts to
//!   integrated Weyl densities, with remainder exponent fits and caching.
//!
//! Everything downstream of a seed is deterministic: stochastic estimators use
//! counter-based RNG streams, and parallel reductions are ordered, so results
//! are byte-identical across worker thread counts.

pub mod classical_dynamics;
pub mod discrete_operator;
pub mod error;
pub mod experiments;
pub mod field_geometry;
pub mod fields;
pub mod linalg;
pub mod numeric;
pub mod rng;
pub mod spectral_count;
pub mod weyl_laws;

pub use error::{Error, Result};

/// Version tag stamped into every serialized artifact (JSON / CSV headers).
pub const SCHEMA_VERSION: u32 = 1;
