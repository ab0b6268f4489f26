//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A field violated the lower intensity bound f1 >= f2 > 0.
    #[error("intensity lower bound violated: f2 = {f2:.3e} at x = {x:?} (field must have f1 >= f2 > 0)")]
    DegenerateIntensity { f2: f64, x: Vec<f64> },

    /// The scalar potential must be strictly positive for logarithmic margins.
    #[error("potential positivity violated: V = {v:.3e} at x = {x:?} (V > 0 required)")]
    NonpositivePotential { v: f64, x: Vec<f64> },

    /// Semiclassical parameter range 1 <= mu <= c/h.
    #[error("semiclassical parameters out of range: mu = {mu:.3e}, h = {h:.3e} ({reason})")]
    BadParameters { mu: f64, h: f64, reason: String },

    /// Periodic boundaries require integer flux through every coordinate 2-plane.
    #[error("flux quantization violated on the torus: mu*F[{j}{k}]*L{j}*L{k}/(2 pi h) = {flux:.9} is not an integer (tolerance {tol:.1e})")]
    FluxNotQuantized { j: usize, k: usize, flux: f64, tol: f64 },

    /// Grid resolution violates the sampling policy for the requested scales.
    #[error("grid too coarse: {reason}")]
    GridTooCoarse { reason: String },

    /// Problem dimension exceeds a method's documented cap.
    #[error("{method} dimension cap exceeded: n = {n} > {cap}")]
    DimensionCap { method: &'static str, n: usize, cap: usize },

    /// The operator does not split into two commuting 2-D blocks.
    #[error("fields do not separate into (x1,x2) x (x3,x4) blocks: {reason}")]
    NotSeparable { reason: String },

    /// Guiding-center / invariant machinery needs a block-structured field.
    #[error("block-structured field required: {reason}")]
    NotBlockStructured { reason: String },

    /// A field or derivative evaluation returned NaN or infinity.
    #[error("non-finite field evaluation: {what} at x = {x:?}")]
    NonFiniteField { what: String, x: Vec<f64> },

    /// Matrix invariants are inconsistent with similarity to a skew form.
    #[error("matrix is not metric-skew: trace invariant s = {s:.6e}, det = {det:.6e} give discriminant {disc:.6e} < -1e-12*s^2")]
    NotSkewSimilar { s: f64, det: f64, disc: f64 },

    /// A submanifold chart was singular where it must be an immersion.
    #[error("chart Jacobian is rank-deficient at u = {u:?} (rank {rank} < {expected})")]
    SingularChart { u: Vec<f64>, rank: usize, expected: usize },

    /// The magnetic matrix is too close to singular to invert stably.
    #[error("magnetic matrix near-singular: f1*f2 = {f1f2:.3e} below floor {floor:.1e} at x = {x:?}")]
    IllConditioned { f1f2: f64, floor: f64, x: Vec<f64> },

    /// Numerical factorization failed beyond repair.
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// An iterative method failed to reach its certificate.
    #[error("{method} did not converge: {reason}")]
    NoConvergence { method: &'static str, reason: String },

    /// Monte-Carlo fit had no resolved bins to regress on.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// Configuration file was syntactically or semantically invalid.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
