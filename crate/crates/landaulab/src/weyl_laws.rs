//! Weyl, magnetic Weyl, and corrected magnetic Weyl spectral densities for
//! the 4-D operator, plus box quadrature against a cutoff function.
//!
//! With W = 2 tau + V(x), a = mu h f1, b = mu h f2, sqrt g = det(g^{jk})^{-1/2}:
//!
//! * Weyl:           (32 pi^2)^-1 h^-4 W_+^2 sqrt g
//! * magnetic Weyl:  (2 pi)^-2 mu^2 h^-2 f1 f2 sqrt g * #{(m,n): (2m+1)a + (2n+1)b <= W}
//! * correction:     same prefactor times the count difference between the
//!   ladder shifted by omega mu^-2 and the unshifted ladder, plus
//!   (4 pi)^-2 mu^-2 h^-4 W omega sqrt g.
//!
//! Ladder points exactly at the threshold are counted (the step function is
//! closed at 0), matching the eigenvalue-counting convention N(tau) =
//! #{lambda <= tau}.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_geometry::IntensitySource;
use crate::fields::{Domain, FieldData, SemiclassicalParams};
use crate::numeric::pairwise_sum;

/// A pointwise density query: fields, semiclassical parameters, evaluation
/// point, and the optional correction amplitude omega(x).
pub struct DensityQuery<'a> {
    pub fields: &'a FieldData,
    pub params: SemiclassicalParams,
    pub x: Vec<f64>,
    pub omega: Option<&'a (dyn Fn(&[f64]) -> f64 + Sync)>,
}

impl<'a> DensityQuery<'a> {
    pub fn new(fields: &'a FieldData, params: SemiclassicalParams, x: Vec<f64>) -> Self {
        assert_eq!(fields.dim, 4, "spectral densities are defined for 4-D fields");
        DensityQuery { fields, params, x, omega: None }
    }

    fn w(&self) -> f64 {
        2.0 * self.params.tau + self.fields.potential_at(&self.x)
    }
}

/// Classical Weyl density (32 pi^2)^-1 h^-4 (2 tau + V)_+^2 sqrt g.
pub fn weyl_density(q: &DensityQuery) -> f64 {
    let w = q.w().max(0.0);
    let sqrt_g = q.fields.sqrt_g(&q.x);
    w * w * sqrt_g / (32.0 * std::f64::consts::PI.powi(2) * q.params.h.powi(4))
}

/// Count #{(m,n) in Z+^2 : (2m+1) a + (2n+1) b <= w} in closed form per row.
/// Thresholds are inclusive.
fn lattice_count(w: f64, a: f64, b: f64) -> f64 {
    debug_assert!(a > 0.0 && b > 0.0);
    if w < a + b {
        return 0.0;
    }
    let m_max = ((w - b) / (2.0 * a) - 0.5).floor() as i64;
    let mut total = 0.0;
    for m in 0..=m_max.max(0) {
        // n <= t with t = (w - (2m+1)a - b) / (2b); count floor(t) + 1 if t >= 0.
        let t = (w - (2 * m + 1) as f64 * a - b) / (2.0 * b);
        if t >= 0.0 {
            total += t.floor() + 1.0;
        }
    }
    total
}

fn ordered_intensities(q: &DensityQuery) -> Result<(f64, f64)> {
    let i = q.fields.intensities(&q.x)?;
    if !(i.f1 > 0.0) || !(i.f2 > 0.0) {
        return Err(Error::DegenerateIntensity { f2: i.f2, x: q.x.clone() });
    }
    Ok((i.f1, i.f2))
}

/// Magnetic Weyl density: the Landau-ladder count times
/// (2 pi)^-2 mu^2 h^-2 f1 f2 sqrt g.
pub fn magnetic_weyl_density(q: &DensityQuery) -> Result<f64> {
    let (f1, f2) = ordered_intensities(q)?;
    let muh = q.params.muh();
    let count = lattice_count(q.w(), muh * f1, muh * f2);
    let sqrt_g = q.fields.sqrt_g(&q.x);
    let pref = (q.params.mu / q.params.h).powi(2) / (4.0 * std::f64::consts::PI.powi(2));
    Ok(pref * f1 * f2 * sqrt_g * count)
}

/// Correction density: ladder-count difference under the omega mu^-2 shift
/// plus the compensating smooth term (4 pi)^-2 mu^-2 h^-4 W omega sqrt g.
/// With omega = 0 this is identically zero.
pub fn corrected_density(q: &DensityQuery) -> Result<f64> {
    let omega = q.omega.map(|f| f(&q.x)).unwrap_or(0.0);
    if omega == 0.0 {
        return Ok(0.0);
    }
    let (f1, f2) = ordered_intensities(q)?;
    let muh = q.params.muh();
    let w = q.w();
    let shift = omega / (q.params.mu * q.params.mu);
    let n_shifted = lattice_count(w - shift, muh * f1, muh * f2);
    let n_base = lattice_count(w, muh * f1, muh * f2);
    let sqrt_g = q.fields.sqrt_g(&q.x);
    let pref = (q.params.mu / q.params.h).powi(2) / (4.0 * std::f64::consts::PI.powi(2));
    let pi2_16 = 16.0 * std::f64::consts::PI.powi(2);
    let smooth = w * omega * sqrt_g / (pi2_16 * (q.params.mu * q.params.h * q.params.h).powi(2));
    Ok(pref * f1 * f2 * sqrt_g * (n_shifted - n_base) + smooth)
}

/// Which density a box integration should evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityKind {
    Weyl,
    MagneticWeyl,
    Corrected,
}

/// Result of a tensor-product midpoint integration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IntegratedDensity {
    pub value: f64,
    /// |fine - half-resolution| Richardson difference.
    pub quadrature_error_estimate: f64,
    /// Fine-grid cell count.
    pub node_count: usize,
    /// True when the cutoff was nonzero in the outermost cell layer.
    pub boundary_touched: bool,
}

fn density_at(
    kind: DensityKind,
    fields: &FieldData,
    params: SemiclassicalParams,
    omega: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>,
    x: &[f64],
) -> Result<f64> {
    let q = DensityQuery { fields, params, x: x.to_vec(), omega };
    match kind {
        DensityKind::Weyl => Ok(weyl_density(&q)),
        DensityKind::MagneticWeyl => magnetic_weyl_density(&q),
        DensityKind::Corrected => corrected_density(&q),
    }
}

/// Integrate a density against the cutoff psi over the box with a midpoint
/// tensor rule; the error estimate comes from a half-resolution pass.
///
/// The midpoint rule is deliberate: the magnetic integrand jumps across
/// Landau thresholds, where higher-order rules lose their advantage. Cell
/// sums are reduced in slab order with pairwise summation, so the value is
/// independent of the rayon worker count.
pub fn integrate_density(
    kind: DensityKind,
    fields: &FieldData,
    params: &SemiclassicalParams,
    omega: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    bx: &Domain,
    nodes: usize,
) -> Result<IntegratedDensity> {
    if nodes < 8 {
        return Err(Error::InvalidConfig(format!(
            "quadrature needs at least 8 nodes per axis, got {nodes}"
        )));
    }
    assert_eq!(fields.dim, bx.dim(), "field and box dimension mismatch");
    let (fine, touched) = sweep(kind, fields, *params, omega, psi, bx, nodes)?;
    let (coarse, _) = sweep(kind, fields, *params, omega, psi, bx, nodes / 2)?;
    Ok(IntegratedDensity {
        value: fine,
        quadrature_error_estimate: (fine - coarse).abs(),
        node_count: nodes.pow(bx.dim() as u32),
        boundary_touched: touched,
    })
}

fn sweep(
    kind: DensityKind,
    fields: &FieldData,
    params: SemiclassicalParams,
    omega: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    bx: &Domain,
    n: usize,
) -> Result<(f64, bool)> {
    let dim = bx.dim();
    let steps: Vec<f64> = bx.lengths.iter().map(|l| l / n as f64).collect();
    let cell_vol: f64 = steps.iter().product();
    let slabs: Vec<Result<(f64, bool)>> = (0..n)
        .into_par_iter()
        .map(|i0| {
            let mut terms = Vec::with_capacity(n.pow(dim as u32 - 1));
            let mut touched = false;
            let mut idx = vec![0usize; dim];
            idx[0] = i0;
            let mut x = vec![0.0; dim];
            loop {
                for j in 0..dim {
                    x[j] = (idx[j] as f64 + 0.5) * steps[j];
                }
                let p = psi(&x);
                if p != 0.0 {
                    if idx.iter().enumerate().any(|(j, &i)| {
                        let _ = j;
                        i == 0 || i == n - 1
                    }) {
                        touched = true;
                    }
                    let d = density_at(kind, fields, params, omega, &x)?;
                    terms.push(p * d);
                }
                // odometer over axes 1..dim (axis 0 fixed to the slab)
                let mut carry = true;
                for j in (1..dim).rev() {
                    if carry {
                        idx[j] += 1;
                        if idx[j] == n {
                            idx[j] = 0;
                        } else {
                            carry = false;
                        }
                    }
                }
                if carry {
                    break;
                }
            }
            Ok((pairwise_sum(&terms), touched))
        })
        .collect();
    let mut sums = Vec::with_capacity(n);
    let mut touched = false;
    for s in slabs {
        let (v, t) = s?;
        sums.push(v);
        touched |= t;
    }
    Ok((pairwise_sum(&sums) * cell_vol, touched))
}
