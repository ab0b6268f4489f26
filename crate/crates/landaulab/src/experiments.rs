//! Sweep orchestration: remainder measurements R(mu, h) = |N_disc - main term|
//! comparing lattice eigenvalue counts against integrated density predictions,
//! with per-point content-addressed caching, an honesty screen that refuses to
//! fit exponents through discretization noise, and a pointwise classification
//! atlas for attributing remainder anomalies to geometric zones.
//!
//! The discrete surrogate for a psi-weighted count is tr(psi theta(tau - H)),
//! estimated by sqrt(psi)-premultiplied stochastic probes; for constant psi it
//! reduces to plain counting scaled by the constant.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discrete_operator::{build_hamiltonian, separable_split, GridSpec};
use crate::error::{Error, Result};
use crate::field_geometry::{classify_point, ClassifyOptions, IntensitySource, PointClassification};
use crate::fields::{
    Boundary, Domain, FieldData, GaugeField, MetricField, Poly, ScalarFn, SemiclassicalParams,
    TrigTerm, MAX_DIM,
};
use crate::numeric::{fd_step, fit_line, pairwise_sum};
use crate::spectral_count::{
    convolve_counts, dense_count, inertia_count_capped, kpm_count, weighted_kpm_count,
    DEFAULT_DENSE_CAP, DEFAULT_INERTIA_CAP,
};
use crate::weyl_laws::{integrate_density, DensityKind, IntegratedDensity};

/// Materialized-hop bound of the lattice operator; KPM grids stay below it.
const KPM_TOTAL_CAP: usize = 1_000_000;

// ─────────────────────────────────────────────────────────────────────────
// Field families
// ─────────────────────────────────────────────────────────────────────────

/// Closed-form field families the sweeps know how to build. Torus families
/// retune the field strength per (mu, h) so the flux through each coordinate
/// plane is an integer number of quanta (`tune_flux`), since a torus operator
/// rejects non-quantized flux outright.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FamilySpec {
    /// 4-D torus, uniform F12 = b1 and F34 = b2, flat metric, constant V.
    Constant {
        b1: f64,
        b2: f64,
        v0: f64,
        lengths: [f64; 4],
        #[serde(default = "default_true")]
        tune_flux: bool,
    },
    /// 2-D torus, uniform field b, constant V.
    Constant2d {
        b: f64,
        v0: f64,
        lengths: [f64; 2],
        #[serde(default = "default_true")]
        tune_flux: bool,
    },
    /// 2-D torus, flux-tuned uniform field near b0, smooth periodic potential
    /// v0 + a1 cos(2 pi x1 / L1) + a2 sin(2 pi x2 / L2).
    Pilot2d { b0: f64, v0: f64, v_amp: [f64; 2], lengths: [f64; 2] },
    /// 2-D Dirichlet box, uniform field b, affine potential
    /// v0 + tilt . (x - center); no flux constraint applies on a box.
    Tilted2d { b: f64, v0: f64, tilt: [f64; 2], lengths: [f64; 2] },
    /// 4-D Dirichlet box; F12 and F34 bend quadratically around `center` so
    /// the intensity ratio f1/f2 has exactly one interior critical point,
    /// non-degenerate in all four directions.
    RatioWell {
        b1: f64,
        b2: f64,
        eps: f64,
        v0: f64,
        center: [f64; 4],
        lengths: [f64; 4],
    },
}

fn default_true() -> bool {
    true
}

/// A family realized at one (mu, h): concrete fields plus sweep metadata.
pub struct FamilyPoint {
    pub fields: FieldData,
    pub domain: Domain,
    /// Block-separable families route through the 2-D factor fast path.
    pub separable: bool,
    pub notes: Vec<String>,
}

/// Nearest integer flux quantum count >= 1 for strength b through a plane of
/// area `area`, and the retuned strength that hits it exactly.
fn tune_flux_quantum(b: f64, area: f64, params: &SemiclassicalParams) -> (u64, f64) {
    let raw = params.mu * b * area / (2.0 * std::f64::consts::PI * params.h);
    let nu = raw.round().max(1.0);
    let tuned = 2.0 * std::f64::consts::PI * params.h * nu / (params.mu * area);
    (nu as u64, tuned)
}

impl FamilySpec {
    pub fn dim(&self) -> usize {
        match self {
            FamilySpec::Constant { .. } | FamilySpec::RatioWell { .. } => 4,
            FamilySpec::Constant2d { .. } | FamilySpec::Pilot2d { .. } => 2,
            FamilySpec::Tilted2d { .. } => 2,
        }
    }

    pub fn lengths(&self) -> Vec<f64> {
        match self {
            FamilySpec::Constant { lengths, .. } | FamilySpec::RatioWell { lengths, .. } => {
                lengths.to_vec()
            }
            FamilySpec::Constant2d { lengths, .. } | FamilySpec::Pilot2d { lengths, .. } => {
                lengths.to_vec()
            }
            FamilySpec::Tilted2d { lengths, .. } => lengths.to_vec(),
        }
    }

    pub fn realize(&self, params: &SemiclassicalParams) -> Result<FamilyPoint> {
        match self {
            FamilySpec::Constant { b1, b2, v0, lengths, tune_flux } => {
                let domain = Domain::new(lengths.to_vec(), Boundary::PeriodicTorus)?;
                let mut notes = Vec::new();
                let (b1e, b2e) = if *tune_flux {
                    let (n1, t1) = tune_flux_quantum(*b1, lengths[0] * lengths[1], params);
                    let (n2, t2) = tune_flux_quantum(*b2, lengths[2] * lengths[3], params);
                    notes.push(format!("flux-tuned b1 = {t1} (nu1 = {n1}), b2 = {t2} (nu2 = {n2})"));
                    (t1, t2)
                } else {
                    (*b1, *b2)
                };
                Ok(FamilyPoint {
                    fields: FieldData::uniform(4, &[b1e, b2e], *v0),
                    domain,
                    separable: true,
                    notes,
                })
            }
            FamilySpec::Constant2d { b, v0, lengths, tune_flux } => {
                let domain = Domain::new(lengths.to_vec(), Boundary::PeriodicTorus)?;
                let mut notes = Vec::new();
                let be = if *tune_flux {
                    let (n, t) = tune_flux_quantum(*b, lengths[0] * lengths[1], params);
                    notes.push(format!("flux-tuned b = {t} (nu = {n})"));
                    t
                } else {
                    *b
                };
                Ok(FamilyPoint {
                    fields: FieldData::uniform(2, &[be], *v0),
                    domain,
                    separable: false,
                    notes,
                })
            }
            FamilySpec::Pilot2d { b0, v0, v_amp, lengths } => {
                if v0 - v_amp[0].abs() - v_amp[1].abs() <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "pilot potential can touch zero: v0 = {v0}, amplitudes {v_amp:?}"
                    )));
                }
                let domain = Domain::new(lengths.to_vec(), Boundary::PeriodicTorus)?;
                let (nu, be) = tune_flux_quantum(*b0, lengths[0] * lengths[1], params);
                let tau = std::f64::consts::TAU;
                let potential = ScalarFn::TrigSum {
                    c0: *v0,
                    terms: vec![
                        TrigTerm {
                            amp: v_amp[0],
                            wave: [tau / lengths[0], 0.0, 0.0, 0.0],
                            phase: 0.0,
                        },
                        TrigTerm {
                            amp: v_amp[1],
                            wave: [0.0, tau / lengths[1], 0.0, 0.0],
                            phase: -0.5 * std::f64::consts::PI,
                        },
                    ],
                };
                let fields = FieldData::new(
                    2,
                    MetricField::Identity,
                    GaugeField::uniform(2, &[be]),
                    potential,
                )?;
                Ok(FamilyPoint {
                    fields,
                    domain,
                    separable: false,
                    notes: vec![format!("flux-tuned b = {be} (nu = {nu})")],
                })
            }
            FamilySpec::Tilted2d { b, v0, tilt, lengths } => {
                if *b <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "tilted box needs a positive field, got b = {b}"
                    )));
                }
                let v_min =
                    v0 - 0.5 * (tilt[0].abs() * lengths[0] + tilt[1].abs() * lengths[1]);
                if v_min <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "tilted potential reaches {v_min} <= 0 on the box: v0 = {v0}, tilt {tilt:?}"
                    )));
                }
                let domain = Domain::new(lengths.to_vec(), Boundary::DirichletBox)?;
                let center = domain.center();
                let potential = ScalarFn::Affine {
                    c0: v0 - tilt[0] * center[0] - tilt[1] * center[1],
                    grad: [tilt[0], tilt[1], 0.0, 0.0],
                };
                let fields = FieldData::new(
                    2,
                    MetricField::Identity,
                    GaugeField::uniform(2, &[*b]),
                    potential,
                )?;
                Ok(FamilyPoint { fields, domain, separable: false, notes: Vec::new() })
            }
            FamilySpec::RatioWell { b1, b2, eps, v0, center, lengths } => {
                let domain = Domain::new(lengths.to_vec(), Boundary::DirichletBox)?;
                // F34 = b2 (1 - eps q34) must stay positive over the box
                let corner2 = |j: usize| center[j].max(lengths[j] - center[j]).powi(2);
                let q34_max = corner2(2) + corner2(3);
                if eps * q34_max >= 0.9 {
                    return Err(Error::InvalidConfig(format!(
                        "ratio-well bend eps = {eps} drives F34 within 10% of zero on the box"
                    )));
                }
                let a2 = ratio_well_component(*b1, *eps, center[0], center[1], 0, 1);
                let a4 = ratio_well_component(*b2, -eps, center[2], center[3], 2, 3);
                let mut components = vec![ScalarFn::zero(); 4];
                components[1] = ScalarFn::Poly(a2);
                components[3] = ScalarFn::Poly(a4);
                let fields = FieldData::new(
                    4,
                    MetricField::Identity,
                    GaugeField { components },
                    ScalarFn::Constant(*v0),
                )?;
                Ok(FamilyPoint { fields, domain, separable: true, notes: Vec::new() })
            }
        }
    }

    /// Analytic critical point of f1/f2 (ratio-well family only).
    pub fn critical_point(&self) -> Option<Vec<f64>> {
        match self {
            FamilySpec::RatioWell { center, .. } => Some(center.to_vec()),
            _ => None,
        }
    }
}

/// Gauge component A(x_u, x_v) = b (x_u + (e/3)(x_u - cu)^3 + e (x_v - cv)^2 x_u),
/// whose curl contribution is F_uv = b (1 + e ((x_u - cu)^2 + (x_v - cv)^2)).
fn ratio_well_component(b: f64, e: f64, cu: f64, cv: f64, u: usize, v: usize) -> Poly {
    let mut terms: Vec<(f64, [u8; MAX_DIM])> = Vec::new();
    let push = |terms: &mut Vec<(f64, [u8; MAX_DIM])>, c: f64, pu: u8, pv: u8| {
        if c != 0.0 {
            let mut p = [0u8; MAX_DIM];
            p[u] = pu;
            p[v] = pv;
            terms.push((c, p));
        }
    };
    let k = b * e;
    push(&mut terms, b + k * (cu * cu + cv * cv), 1, 0); // x_u
    push(&mut terms, k / 3.0, 3, 0); // x_u^3
    push(&mut terms, -k * cu, 2, 0); // x_u^2
    push(&mut terms, -k * cu * cu * cu / 3.0, 0, 0); // const
    push(&mut terms, k, 1, 2); // x_u x_v^2
    push(&mut terms, -2.0 * k * cv, 1, 1); // x_u x_v
    Poly { terms }
}

// ─────────────────────────────────────────────────────────────────────────
// Cutoff functions
// ─────────────────────────────────────────────────────────────────────────

/// Spatial cutoff psi entering both the integral and the weighted count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PsiSpec {
    Constant { value: f64 },
    /// scale * prod_j cos(pi (x_j - c_j) / (2 w_j))^(2 power) on the block
    /// |x_j - c_j| < w_j, zero outside; C^(2 power - 1) at the edge.
    CosBump {
        center: Vec<f64>,
        halfwidth: Vec<f64>,
        #[serde(default = "default_bump_power")]
        power: u32,
        #[serde(default = "default_one")]
        scale: f64,
    },
}

fn default_bump_power() -> u32 {
    2
}

fn default_one() -> f64 {
    1.0
}

impl PsiSpec {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            PsiSpec::Constant { value } => *value,
            PsiSpec::CosBump { center, halfwidth, power, scale } => {
                let mut acc = *scale;
                for j in 0..center.len() {
                    let t = (x[j] - center[j]) / halfwidth[j];
                    if t.abs() >= 1.0 {
                        return 0.0;
                    }
                    let c = (0.5 * std::f64::consts::PI * t).cos();
                    acc *= c.powi(2 * *power as i32);
                }
                acc
            }
        }
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self {
            PsiSpec::Constant { value } => Some(*value),
            PsiSpec::CosBump { .. } => None,
        }
    }

    pub fn negated(&self) -> PsiSpec {
        match self.clone() {
            PsiSpec::Constant { value } => PsiSpec::Constant { value: -value },
            PsiSpec::CosBump { center, halfwidth, power, scale } => {
                PsiSpec::CosBump { center, halfwidth, power, scale: -scale }
            }
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Sweep specification
// ─────────────────────────────────────────────────────────────────────────

/// Lattice resolution rule: the step must resolve both the shortest de
/// Broglie wavelength in the energy window, s <= h / (c p_max), and the
/// cyclotron orbit, s <= r_c / divisor with r_c = p_max / (mu f_max).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridPolicy {
    /// c in s <= h / (c p_max).
    pub oscillation_safety: f64,
    /// Divisor in s <= r_c / divisor.
    pub radius_divisor: f64,
    /// Hard per-axis node cap; defaults depend on the counting method.
    pub axis_cap: Option<usize>,
    /// Per-axis floor (boundaries additionally require 2 or 3 nodes).
    pub min_axis: usize,
}

impl Default for GridPolicy {
    fn default() -> Self {
        GridPolicy {
            oscillation_safety: 3.0,
            radius_divisor: 8.0,
            axis_cap: None,
            min_axis: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodChoice {
    /// Separable fast path when the family supports it, else the largest
    /// exact method that fits, else stochastic.
    #[default]
    Auto,
    Dense,
    Inertia,
    Kpm,
    Separable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KpmOptions {
    pub moments: usize,
    pub probes: usize,
}

impl Default for KpmOptions {
    fn default() -> Self {
        KpmOptions { moments: 512, probes: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuH {
    pub mu: f64,
    pub h: f64,
}

/// mu = c h^{-kappa} evaluated on the listed h values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ladder {
    pub c: f64,
    pub kappa: f64,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub family: FamilySpec,
    pub tau: f64,
    #[serde(default)]
    pub points: Vec<MuH>,
    #[serde(default)]
    pub ladder: Option<Ladder>,
    #[serde(default)]
    pub grid: GridPolicy,
    /// Absent means psi identically 1.
    #[serde(default)]
    pub psi: Option<PsiSpec>,
    #[serde(default)]
    pub method: MethodChoice,
    #[serde(default)]
    pub kpm: KpmOptions,
    /// Quadrature nodes per axis for the density integrals; defaults to 128
    /// in 2-D and 16 in 4-D.
    #[serde(default)]
    pub quad_nodes: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_schema() -> u32 {
    crate::SCHEMA_VERSION
}

fn default_seed() -> u64 {
    0x1a11da0
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("sweep config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != crate::SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported sweep schema version {} (this build reads {})",
                self.schema_version,
                crate::SCHEMA_VERSION
            )));
        }
        let pts = self.all_points();
        if pts.is_empty() {
            return Err(Error::InvalidConfig(
                "sweep has no (mu, h) points: give [[points]] or a [ladder]".into(),
            ));
        }
        for p in &pts {
            if !(p.0.is_finite() && p.1.is_finite() && p.1 > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "inadmissible sweep point (mu, h) = ({}, {})",
                    p.0, p.1
                )));
            }
        }
        if let Some(l) = &self.ladder {
            if !(l.c > 0.0 && l.c.is_finite() && l.kappa.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "ladder needs finite kappa and positive c, got c = {}, kappa = {}",
                    l.c, l.kappa
                )));
            }
        }
        if !(self.grid.oscillation_safety > 0.0 && self.grid.radius_divisor > 0.0) {
            return Err(Error::InvalidConfig(
                "grid policy factors must be positive".into(),
            ));
        }
        if self.grid.min_axis < 2 {
            return Err(Error::InvalidConfig("grid min_axis must be at least 2".into()));
        }
        if let Some(nodes) = self.quad_nodes {
            if nodes < 8 {
                return Err(Error::InvalidConfig(format!(
                    "quadrature needs at least 8 nodes per axis, got {nodes}"
                )));
            }
        }
        if let Some(psi) = &self.psi {
            if let PsiSpec::CosBump { center, halfwidth, .. } = psi {
                let d = self.family.dim();
                if center.len() != d || halfwidth.len() != d {
                    return Err(Error::InvalidConfig(format!(
                        "psi bump is {}-D but the family is {d}-D",
                        center.len()
                    )));
                }
                if halfwidth.iter().any(|&w| !(w > 0.0)) {
                    return Err(Error::InvalidConfig(
                        "psi bump halfwidths must be positive".into(),
                    ));
                }
            }
            if psi.constant_value().is_none()
                && !matches!(self.method, MethodChoice::Auto | MethodChoice::Kpm)
            {
                return Err(Error::InvalidConfig(format!(
                    "non-constant psi needs the stochastic weighted count; method {:?} cannot weight sites",
                    self.method
                )));
            }
        }
        Ok(())
    }

    /// Explicit pairs followed by ladder-generated pairs; the flag records
    /// ladder membership for the fit.
    pub fn all_points(&self) -> Vec<(f64, f64, bool)> {
        let mut out: Vec<(f64, f64, bool)> =
            self.points.iter().map(|p| (p.mu, p.h, false)).collect();
        if let Some(l) = &self.ladder {
            for &h in &l.h {
                out.push((l.c * h.powf(-l.kappa), h, true));
            }
        }
        out
    }

    fn psi(&self) -> PsiSpec {
        self.psi.clone().unwrap_or(PsiSpec::Constant { value: 1.0 })
    }

    fn quad_nodes_for(&self, dim: usize) -> usize {
        self.quad_nodes.unwrap_or(if dim == 2 { 128 } else { 16 })
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Method resolution and grid planning
// ─────────────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
enum ResolvedMethod {
    SeparableDense,
    Dense,
    Inertia,
    Kpm,
    WeightedKpm,
}

impl ResolvedMethod {
    fn label(self) -> &'static str {
        match self {
            ResolvedMethod::SeparableDense => "separable-dense",
            ResolvedMethod::Dense => "dense",
            ResolvedMethod::Inertia => "inertia",
            ResolvedMethod::Kpm => "kpm",
            ResolvedMethod::WeightedKpm => "weighted-kpm",
        }
    }

    /// Per-axis default cap and total-site cap.
    fn caps(self, dim: usize) -> (usize, usize) {
        match (self, dim) {
            (ResolvedMethod::SeparableDense, _) => (77, DEFAULT_DENSE_CAP * DEFAULT_DENSE_CAP),
            (ResolvedMethod::Dense, 2) => (77, DEFAULT_DENSE_CAP),
            (ResolvedMethod::Dense, _) => (8, DEFAULT_DENSE_CAP),
            (ResolvedMethod::Inertia, 2) => (547, DEFAULT_INERTIA_CAP),
            (ResolvedMethod::Inertia, _) => (14, DEFAULT_INERTIA_CAP),
            (ResolvedMethod::Kpm | ResolvedMethod::WeightedKpm, 2) => (512, KPM_TOTAL_CAP),
            (ResolvedMethod::Kpm | ResolvedMethod::WeightedKpm, _) => (14, KPM_TOTAL_CAP),
        }
    }
}

fn resolve_method(
    choice: MethodChoice,
    psi_constant: bool,
    separable: bool,
    dim: usize,
) -> Result<ResolvedMethod> {
    match choice {
        MethodChoice::Auto => Ok(if !psi_constant {
            ResolvedMethod::WeightedKpm
        } else if separable && dim == 4 {
            ResolvedMethod::SeparableDense
        } else {
            // placeholder: promoted to Dense after planning when it fits
            ResolvedMethod::Inertia
        }),
        MethodChoice::Dense => Ok(ResolvedMethod::Dense),
        MethodChoice::Inertia => Ok(ResolvedMethod::Inertia),
        MethodChoice::Kpm => {
            Ok(if psi_constant { ResolvedMethod::Kpm } else { ResolvedMethod::WeightedKpm })
        }
        MethodChoice::Separable => {
            if !separable || dim != 4 {
                return Err(Error::NotSeparable {
                    reason: "the requested family has no 2-D factor structure".into(),
                });
            }
            Ok(ResolvedMethod::SeparableDense)
        }
    }
}

/// Plan grid dims from the resolution rule, then clamp to caps. Returns the
/// dims and whether clamping left the grid under the rule.
fn plan_dims(
    policy: &GridPolicy,
    domain: &Domain,
    params: &SemiclassicalParams,
    v_max: f64,
    f_max: f64,
    method: ResolvedMethod,
) -> (Vec<usize>, bool) {
    let (axis_default, total_cap) = method.caps(domain.dim());
    let axis_cap = policy.axis_cap.unwrap_or(axis_default);
    let min_nodes = match domain.boundary {
        Boundary::DirichletBox => 2,
        Boundary::PeriodicTorus => 3,
    }
    .max(policy.min_axis);

    let w = (2.0 * params.tau + v_max).max(0.0);
    let p_max = w.sqrt();
    let mut s_max = f64::INFINITY;
    if p_max > 0.0 {
        s_max = s_max.min(params.h / (policy.oscillation_safety * p_max));
        if f_max > 0.0 {
            s_max = s_max.min(p_max / (params.mu * f_max) / policy.radius_divisor);
        }
    }

    let mut under = false;
    let mut dims: Vec<usize> = domain
        .lengths
        .iter()
        .map(|&l| {
            let want = if s_max.is_finite() {
                (l / s_max).ceil().min(1e9) as usize
            } else {
                min_nodes
            };
            let want = want.max(min_nodes);
            if want > axis_cap.max(min_nodes) {
                under = true;
                axis_cap.max(min_nodes)
            } else {
                want
            }
        })
        .collect();

    // shrink the largest axes until the total (per-factor total for the
    // separable path) fits the method cap
    let fits = |d: &[usize]| -> bool {
        if method == ResolvedMethod::SeparableDense {
            d[0] * d[1] <= DEFAULT_DENSE_CAP && d[2] * d[3] <= DEFAULT_DENSE_CAP
        } else {
            d.iter().product::<usize>() <= total_cap
        }
    };
    while !fits(&dims) {
        let j = (0..dims.len()).max_by_key(|&j| dims[j]).unwrap();
        if dims[j] <= min_nodes {
            break;
        }
        dims[j] -= 1;
        under = true;
    }
    (dims, under)
}

fn halved_dims(dims: &[usize], domain: &Domain) -> Vec<usize> {
    let floor = match domain.boundary {
        Boundary::DirichletBox => 2,
        Boundary::PeriodicTorus => 3,
    };
    dims.iter().map(|&n| (n / 2).max(floor)).collect()
}

/// Coarse extrema of potential and intensities over the box (9 samples per
/// axis); used only to size grids and quadratures.
fn probe_extrema(fields: &FieldData, domain: &Domain) -> Result<(f64, f64, f64)> {
    let d = domain.dim();
    let n = 9usize;
    let total = n.pow(d as u32);
    let mut v_max = f64::NEG_INFINITY;
    let mut f_min = f64::INFINITY;
    let mut f_max: f64 = 0.0;
    let mut x = vec![0.0; d];
    for flat in 0..total {
        let mut rem = flat;
        for j in (0..d).rev() {
            let i = rem % n;
            rem /= n;
            x[j] = (i as f64 + 0.5) * domain.lengths[j] / n as f64;
        }
        v_max = v_max.max(fields.potential_at(&x));
        let ip = fields.intensities(&x)?;
        f_min = f_min.min(ip.f2);
        f_max = f_max.max(ip.f1);
    }
    Ok((v_max, f_min, f_max))
}

// ─────────────────────────────────────────────────────────────────────────
// 2-D densities (the pilot machinery; the 4-D laws live in weyl_laws)
// ─────────────────────────────────────────────────────────────────────────

/// 2-D magnetic Weyl density (2 pi)^-1 mu h^-1 f sqrt(g) #{m : (2m+1) mu h f <= W}.
pub fn magnetic_weyl_density_2d(
    fields: &FieldData,
    params: &SemiclassicalParams,
    x: &[f64],
) -> Result<f64> {
    let ip = fields.intensities(x)?;
    let f = ip.f1;
    if f <= 1e-12 {
        return Err(Error::DegenerateIntensity { f2: ip.f2, x: x.to_vec() });
    }
    let w = 2.0 * params.tau + fields.potential_at(x);
    let a = params.muh() * f;
    let levels = if w < a { 0.0 } else { ((w / a - 1.0) / 2.0).floor() + 1.0 };
    Ok(params.mu / (2.0 * std::f64::consts::PI * params.h) * f * fields.sqrt_g(x) * levels)
}

/// 2-D classical Weyl density (4 pi)^-1 h^-2 W_+ sqrt(g).
pub fn weyl_density_2d(fields: &FieldData, params: &SemiclassicalParams, x: &[f64]) -> f64 {
    let w = (2.0 * params.tau + fields.potential_at(x)).max(0.0);
    w * fields.sqrt_g(x) / (4.0 * std::f64::consts::PI * params.h * params.h)
}

/// Integrated 2-D density record; the 4-D laws integrate via `weyl_laws`.
pub fn integrate_density_2d(
    kind: DensityKind,
    fields: &FieldData,
    params: &SemiclassicalParams,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    domain: &Domain,
    nodes: usize,
) -> Result<IntegratedDensity> {
    if fields.dim != 2 || domain.dim() != 2 {
        return Err(Error::InvalidConfig(format!(
            "2-D density integration got a {}-D field on a {}-D domain",
            fields.dim,
            domain.dim()
        )));
    }
    match kind {
        DensityKind::Weyl => integrate_box_2d(
            &|x| Ok(weyl_density_2d(fields, params, x)),
            psi,
            &domain.lengths,
            nodes,
        ),
        DensityKind::MagneticWeyl => integrate_box_2d(
            &|x| magnetic_weyl_density_2d(fields, params, x),
            psi,
            &domain.lengths,
            nodes,
        ),
        DensityKind::Corrected => Err(Error::InvalidConfig(
            "the correction term is defined only for 4-D operators".into(),
        )),
    }
}

/// Midpoint tensor quadrature of density * psi over the 2-D box with a
/// half-resolution Richardson error estimate; slab-ordered pairwise sums keep
/// the value independent of the worker count.
fn integrate_box_2d(
    density: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    lengths: &[f64],
    nodes: usize,
) -> Result<IntegratedDensity> {
    if nodes < 8 {
        return Err(Error::InvalidConfig(format!(
            "quadrature needs at least 8 nodes per axis, got {nodes}"
        )));
    }
    let pass = |n: usize| -> Result<(f64, bool)> {
        let sx = lengths[0] / n as f64;
        let sy = lengths[1] / n as f64;
        let rows: Vec<Result<(f64, bool)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x0 = (i as f64 + 0.5) * sx;
                let mut terms = Vec::with_capacity(n);
                let mut touched = false;
                for j in 0..n {
                    let x = [x0, (j as f64 + 0.5) * sy];
                    let p = psi(&x);
                    if p != 0.0 {
                        if i == 0 || i == n - 1 || j == 0 || j == n - 1 {
                            touched = true;
                        }
                        terms.push(p * density(&x)?);
                    }
                }
                Ok((pairwise_sum(&terms), touched))
            })
            .collect();
        let mut sums = Vec::with_capacity(n);
        let mut touched = false;
        for r in rows {
            let (s, t) = r?;
            sums.push(s);
            touched |= t;
        }
        Ok((pairwise_sum(&sums) * sx * sy, touched))
    };
    let (fine, touched) = pass(nodes)?;
    let (coarse, _) = pass(nodes / 2)?;
    Ok(IntegratedDensity {
        value: fine,
        quadrature_error_estimate: (fine - coarse).abs(),
        node_count: nodes * nodes,
        boundary_touched: touched,
    })
}

// ─────────────────────────────────────────────────────────────────────────
// Sweep rows
// ─────────────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowData {
    pub dims: Vec<usize>,
    pub method: String,
    /// psi-weighted count tr(psi theta(tau - H)); plain N(tau) when psi = 1.
    pub n_disc: f64,
    pub n_disc_stderr: Option<f64>,
    pub main_term: f64,
    pub corrected_term: f64,
    pub remainder: f64,
    pub corrected_remainder: f64,
    /// |count(s) - count(2s)| plus quadrature and probe-noise contributions.
    pub disc_error_estimate: f64,
    pub quadrature_error_estimate: f64,
    pub under_resolved: bool,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RowOutcome {
    Done(RowData),
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mu: f64,
    pub h: f64,
    pub on_ladder: bool,
    pub outcome: RowOutcome,
}

/// One eigenvalue-count evaluation on a concrete grid.
fn count_on(
    point: &FamilyPoint,
    params: &SemiclassicalParams,
    spec: &SweepSpec,
    psi: &PsiSpec,
    method: ResolvedMethod,
    dims: &[usize],
) -> Result<(f64, Option<f64>)> {
    let grid = GridSpec::new(point.domain.clone(), dims)?;
    let tau = params.tau;
    let scale = psi.constant_value().unwrap_or(1.0);
    match method {
        ResolvedMethod::SeparableDense => {
            let (a12, a34) = separable_split(&point.fields, &grid, params)?;
            let c12 = dense_count(&a12, &[tau])?;
            let c34 = dense_count(&a34, &[tau])?;
            let curve = convolve_counts(&c12, &c34, &[tau])?;
            Ok((scale * curve.counts[0], None))
        }
        ResolvedMethod::Dense => {
            let ham = build_hamiltonian(&point.fields, &grid, params)?;
            let curve = dense_count(&ham, &[tau])?;
            Ok((scale * curve.counts[0], None))
        }
        ResolvedMethod::Inertia => {
            let ham = build_hamiltonian(&point.fields, &grid, params)?;
            let n = inertia_count_capped(&ham, tau, DEFAULT_INERTIA_CAP)?;
            Ok((scale * n as f64, None))
        }
        ResolvedMethod::Kpm => {
            let ham = build_hamiltonian(&point.fields, &grid, params)?;
            let curve = kpm_count(&ham, &[tau], spec.kpm.moments, spec.kpm.probes, spec.seed)?;
            Ok((scale * curve.counts[0], Some(scale.abs() * curve.stderr.as_ref().unwrap()[0])))
        }
        ResolvedMethod::WeightedKpm => {
            let ham = build_hamiltonian(&point.fields, &grid, params)?;
            let weights = node_psi_weights(&grid, psi);
            let curve = weighted_kpm_count(
                &ham,
                &weights,
                &[tau],
                spec.kpm.moments,
                spec.kpm.probes,
                spec.seed,
            )?;
            Ok((curve.counts[0], Some(curve.stderr.as_ref().unwrap()[0])))
        }
    }
}

/// psi sampled at every lattice site in the operator's storage order.
fn node_psi_weights(grid: &GridSpec, psi: &PsiSpec) -> Vec<f64> {
    let dims = grid.dims();
    let strides = grid.strides();
    let d = dims.len();
    let n = grid.n_sites();
    let mut multi = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut out = Vec::with_capacity(n);
    for site in 0..n {
        for j in 0..d {
            multi[j] = (site / strides[j]) % dims[j];
        }
        grid.node(&multi, &mut x);
        out.push(psi.eval(&x));
    }
    out
}

fn compute_row(spec: &SweepSpec, mu: f64, h: f64, on_ladder: bool) -> SweepRow {
    let outcome = match compute_row_inner(spec, mu, h) {
        Ok(data) => RowOutcome::Done(data),
        Err(e) => RowOutcome::Failed { error: e.to_string() },
    };
    SweepRow { mu, h, on_ladder, outcome }
}

fn compute_row_inner(spec: &SweepSpec, mu: f64, h: f64) -> Result<RowData> {
    let params = SemiclassicalParams::new(mu, h, spec.tau)?;
    let point = spec.family.realize(&params)?;
    let dim = point.domain.dim();
    let psi = spec.psi();
    let psi_const = psi.constant_value();

    let (v_max, _f_min, f_max) = probe_extrema(&point.fields, &point.domain)?;
    let mut method = resolve_method(spec.method, psi_const.is_some(), point.separable, dim)?;
    let (dims, under_resolved) = plan_dims(&spec.grid, &point.domain, &params, v_max, f_max, method);
    if spec.method == MethodChoice::Auto
        && method == ResolvedMethod::Inertia
        && dims.iter().product::<usize>() <= DEFAULT_DENSE_CAP
    {
        method = ResolvedMethod::Dense;
    }

    let mut notes = point.notes.clone();

    let (n_disc, n_stderr) = count_on(&point, &params, spec, &psi, method, &dims)?;

    // discretization proxy: one Richardson level against the halved grid
    let half = halved_dims(&dims, &point.domain);
    let mut disc_err;
    if half == dims {
        disc_err = n_disc.abs().max(1.0);
        notes.push("grid floor reached; no coarser grid for the error proxy".into());
    } else {
        let (n_half, half_stderr) = count_on(&point, &params, spec, &psi, method, &half)?;
        disc_err = (n_disc - n_half).abs();
        if let (Some(a), Some(b)) = (n_stderr, half_stderr) {
            disc_err += 3.0 * (a + b);
        }
    }

    let psi_fn = |x: &[f64]| psi.eval(x);
    let qn = spec.quad_nodes_for(dim);
    let (main, corrected) = if dim == 4 {
        let main = integrate_density(
            DensityKind::MagneticWeyl,
            &point.fields,
            &params,
            None,
            &psi_fn,
            &point.domain,
            qn,
        )?;
        let corr = integrate_density(
            DensityKind::Corrected,
            &point.fields,
            &params,
            None,
            &psi_fn,
            &point.domain,
            qn,
        )?;
        (main, corr)
    } else {
        let main = integrate_density_2d(
            DensityKind::MagneticWeyl,
            &point.fields,
            &params,
            &psi_fn,
            &point.domain,
            qn,
        )?;
        notes.push("2-D family: corrected column mirrors the main term".into());
        (main, main)
    };

    Ok(RowData {
        dims,
        method: method.label().to_string(),
        n_disc,
        n_disc_stderr: n_stderr,
        main_term: main.value,
        corrected_term: corrected.value,
        remainder: (n_disc - main.value).abs(),
        corrected_remainder: (n_disc - corrected.value).abs(),
        disc_error_estimate: disc_err,
        quadrature_error_estimate: main.quadrature_error_estimate,
        under_resolved,
        notes,
    })
}

// ─────────────────────────────────────────────────────────────────────────
// Cache
// ─────────────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct PointFingerprint<'a> {
    schema_version: u32,
    family: &'a FamilySpec,
    tau_bits: u64,
    psi: Option<&'a PsiSpec>,
    method: MethodChoice,
    kpm: KpmOptions,
    grid: &'a GridPolicy,
    quad_nodes: Option<usize>,
    seed: u64,
    mu_bits: u64,
    h_bits: u64,
    on_ladder: bool,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    fingerprint: String,
    row: SweepRow,
}

fn point_fingerprint(spec: &SweepSpec, mu: f64, h: f64, on_ladder: bool) -> String {
    let fp = PointFingerprint {
        schema_version: spec.schema_version,
        family: &spec.family,
        tau_bits: spec.tau.to_bits(),
        psi: spec.psi.as_ref(),
        method: spec.method,
        kpm: spec.kpm,
        grid: &spec.grid,
        quad_nodes: spec.quad_nodes,
        seed: spec.seed,
        mu_bits: mu.to_bits(),
        h_bits: h.to_bits(),
        on_ladder,
    };
    let bytes = serde_json::to_vec(&fp).expect("fingerprint serialization");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

fn load_cached(dir: &Path, fingerprint: &str) -> Option<SweepRow> {
    let path = dir.join(format!("{fingerprint}.json"));
    let text = fs::read_to_string(path).ok()?;
    let rec: CacheRecord = serde_json::from_str(&text).ok()?;
    (rec.fingerprint == fingerprint).then_some(rec.row)
}

fn store_cached(dir: &Path, fingerprint: &str, row: &SweepRow) {
    let rec = CacheRecord { fingerprint: fingerprint.to_string(), row: row.clone() };
    if let Ok(mut bytes) = serde_json::to_vec_pretty(&rec) {
        bytes.push(b'\n');
        // a failed write only costs the cache hit next run
        let _ = fs::write(dir.join(format!("{fingerprint}.json")), bytes);
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Remainder fit
// ─────────────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FitOutcome {
    Exponents {
        /// None when mu does not vary independently of h in the usable rows.
        mu_exponent: Option<f64>,
        mu_stderr: Option<f64>,
        h_exponent: Option<f64>,
        h_stderr: Option<f64>,
        residual_rms: f64,
        n_used: usize,
        /// log mu and log h were (nearly) collinear, so the h exponent
        /// absorbs the ladder relation mu = c h^-kappa.
        collinear: bool,
    },
    DiscretizationLimited { usable_points: usize, required: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemainderFit {
    pub schema_version: u32,
    pub rows: Vec<SweepRow>,
    pub fit: FitOutcome,
}

/// A row survives the honesty screen when its remainder exceeds 5x the
/// combined discretization + quadrature (+ probe noise) estimate.
fn screen_ok(d: &RowData) -> bool {
    let err = d.disc_error_estimate + d.quadrature_error_estimate;
    d.remainder > 5.0 * err && d.remainder > 0.0
}

fn fit_remainders(rows: &[SweepRow], ladder_present: bool) -> FitOutcome {
    let usable: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter(|r| !ladder_present || r.on_ladder)
        .filter_map(|r| match &r.outcome {
            RowOutcome::Done(d) if screen_ok(d) => Some((r.mu.ln(), r.h.ln(), d.remainder.ln())),
            _ => None,
        })
        .collect();
    let required = 4;
    if usable.len() < required {
        return FitOutcome::DiscretizationLimited {
            usable_points: usable.len(),
            required,
            reason: "fewer than 4 points with remainder above 5x the discretization error"
                .into(),
        };
    }
    let lmu: Vec<f64> = usable.iter().map(|u| u.0).collect();
    let lh: Vec<f64> = usable.iter().map(|u| u.1).collect();
    let y: Vec<f64> = usable.iter().map(|u| u.2).collect();
    let n = usable.len();

    let spread = |v: &[f64]| {
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let su = spread(&lmu);
    let sv = spread(&lh);
    if su < 1e-9 && sv < 1e-9 {
        return FitOutcome::DiscretizationLimited {
            usable_points: n,
            required,
            reason: "neither mu nor h varies across the usable points".into(),
        };
    }
    if su < 1e-9 {
        let (_, slope, se) = fit_line(&lh, &y);
        return FitOutcome::Exponents {
            mu_exponent: None,
            mu_stderr: None,
            h_exponent: Some(slope),
            h_stderr: Some(se),
            residual_rms: rms_about_line(&lh, &y, slope),
            n_used: n,
            collinear: false,
        };
    }
    if sv < 1e-9 {
        let (_, slope, se) = fit_line(&lmu, &y);
        return FitOutcome::Exponents {
            mu_exponent: Some(slope),
            mu_stderr: Some(se),
            h_exponent: None,
            h_stderr: None,
            residual_rms: rms_about_line(&lmu, &y, slope),
            n_used: n,
            collinear: false,
        };
    }

    let corr = pearson(&lmu, &lh);
    if corr.abs() < 0.9999 {
        if let Some((a, b, sea, seb, rms)) = ols_two_exponents(&lmu, &lh, &y) {
            return FitOutcome::Exponents {
                mu_exponent: Some(a),
                mu_stderr: Some(sea),
                h_exponent: Some(b),
                h_stderr: Some(seb),
                residual_rms: rms,
                n_used: n,
                collinear: false,
            };
        }
    }
    // ladder-collinear: only the combined h scaling is identifiable
    let (_, slope, se) = fit_line(&lh, &y);
    FitOutcome::Exponents {
        mu_exponent: None,
        mu_stderr: None,
        h_exponent: Some(slope),
        h_stderr: Some(se),
        residual_rms: rms_about_line(&lh, &y, slope),
        n_used: n,
        collinear: true,
    }
}

fn pearson(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mu = pairwise_sum(u) / n;
    let mv = pairwise_sum(v) / n;
    let mut suu = 0.0;
    let mut svv = 0.0;
    let mut suv = 0.0;
    for (a, b) in u.iter().zip(v) {
        suu += (a - mu) * (a - mu);
        svv += (b - mv) * (b - mv);
        suv += (a - mu) * (b - mv);
    }
    if suu <= 0.0 || svv <= 0.0 {
        return 1.0;
    }
    suv / (suu * svv).sqrt()
}

fn rms_about_line(x: &[f64], y: &[f64], slope: f64) -> f64 {
    let n = x.len() as f64;
    let xb = pairwise_sum(x) / n;
    let yb = pairwise_sum(y) / n;
    let res: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| {
            let r = (yi - yb) - slope * (xi - xb);
            r * r
        })
        .collect();
    (pairwise_sum(&res) / n).sqrt()
}

/// y ~ c + a lmu + b lh by least squares; returns (a, b, se_a, se_b, rms).
fn ols_two_exponents(
    lmu: &[f64],
    lh: &[f64],
    y: &[f64],
) -> Option<(f64, f64, f64, f64, f64)> {
    use nalgebra::{DMatrix, DVector};
    let n = y.len();
    let mut x = DMatrix::<f64>::zeros(n, 3);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = lmu[i];
        x[(i, 2)] = lh[i];
    }
    let yy = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let inv = xtx.try_inverse()?;
    let beta = &inv * (x.transpose() * &yy);
    let resid = &yy - &x * &beta;
    let rss: f64 = resid.iter().map(|r| r * r).sum();
    let dof = (n as f64 - 3.0).max(1.0);
    let sigma2 = rss / dof;
    let se_a = (sigma2 * inv[(1, 1)]).sqrt();
    let se_b = (sigma2 * inv[(2, 2)]).sqrt();
    Some((beta[1], beta[2], se_a, se_b, (rss / n as f64).sqrt()))
}

// ─────────────────────────────────────────────────────────────────────────
// Sweep driver and output files
// ─────────────────────────────────────────────────────────────────────────

/// Run every (mu, h) point (work-stealing, order-preserving), fit the
/// remainder exponents over the surviving rows, and emit the configured
/// artifacts. Failed points are recorded and do not stop the sweep;
/// completed points are reused from the content-addressed cache.
pub fn run_sweep(spec: &SweepSpec) -> Result<RemainderFit> {
    spec.validate()?;
    if let Some(dir) = &spec.cache_dir {
        fs::create_dir_all(dir)?;
    }
    let pts = spec.all_points();
    let rows: Vec<SweepRow> = pts
        .par_iter()
        .map(|&(mu, h, on_ladder)| {
            let fp = point_fingerprint(spec, mu, h, on_ladder);
            if let Some(dir) = &spec.cache_dir {
                if let Some(row) = load_cached(dir, &fp) {
                    return row;
                }
            }
            let row = compute_row(spec, mu, h, on_ladder);
            if let Some(dir) = &spec.cache_dir {
                store_cached(dir, &fp, &row);
            }
            row
        })
        .collect();

    let fit = fit_remainders(&rows, spec.ladder.is_some());
    let out = RemainderFit { schema_version: crate::SCHEMA_VERSION, rows, fit };
    if let Some(dir) = &spec.output_dir {
        write_outputs(spec, &out, dir)?;
    }
    Ok(out)
}

fn write_outputs(spec: &SweepSpec, fit: &RemainderFit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("points"))?;
    for (i, row) in fit.rows.iter().enumerate() {
        let fp = point_fingerprint(spec, row.mu, row.h, row.on_ladder);
        let rec = CacheRecord { fingerprint: fp, row: row.clone() };
        let mut bytes = serde_json::to_vec_pretty(&rec)
            .map_err(|e| Error::InvalidConfig(format!("point record serialization: {e}")))?;
        bytes.push(b'\n');
        fs::write(dir.join("points").join(format!("point_{i:04}.json")), bytes)?;
    }
    fs::write(dir.join("sweep.csv"), render_csv(fit))?;
    fs::write(dir.join("fit_summary.json"), render_fit_summary(&fit.fit))?;
    Ok(())
}

fn render_csv(fit: &RemainderFit) -> String {
    let mut s = String::new();
    s.push_str(&format!("# schema_version {}\n", fit.schema_version));
    s.push_str(
        "mu,h,dims,method,on_ladder,n_disc,n_disc_stderr,main_term,corrected_term,remainder,corrected_remainder,disc_error,quad_error,under_resolved,failed\n",
    );
    for r in &fit.rows {
        match &r.outcome {
            RowOutcome::Done(d) => {
                let dims = d
                    .dims
                    .iter()
                    .map(|n| n.to_string())
                    .collect::<Vec<_>>()
                    .join("x");
                let stderr = d.n_disc_stderr.map(|v| v.to_string()).unwrap_or_default();
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},\n",
                    r.mu,
                    r.h,
                    dims,
                    d.method,
                    r.on_ladder,
                    d.n_disc,
                    stderr,
                    d.main_term,
                    d.corrected_term,
                    d.remainder,
                    d.corrected_remainder,
                    d.disc_error_estimate,
                    d.quadrature_error_estimate,
                    d.under_resolved,
                ));
            }
            RowOutcome::Failed { error } => {
                let msg = error.replace([',', '\n'], ";");
                s.push_str(&format!(
                    "{},{},,,{},,,,,,,,,,{}\n",
                    r.mu, r.h, r.on_ladder, msg
                ));
            }
        }
    }
    s
}

#[derive(Serialize)]
struct ExponentPair {
    mu: Option<f64>,
    h: Option<f64>,
}

#[derive(Serialize)]
struct FitSummaryFile {
    schema_version: u32,
    limited_flag: bool,
    n_points: usize,
    exponents: ExponentPair,
    stderr: ExponentPair,
    residual_rms: Option<f64>,
    collinear: Option<bool>,
    note: String,
}

fn render_fit_summary(fit: &FitOutcome) -> Vec<u8> {
    let file = match fit {
        FitOutcome::Exponents {
            mu_exponent,
            mu_stderr,
            h_exponent,
            h_stderr,
            residual_rms,
            n_used,
            collinear,
        } => FitSummaryFile {
            schema_version: crate::SCHEMA_VERSION,
            limited_flag: false,
            n_points: *n_used,
            exponents: ExponentPair { mu: *mu_exponent, h: *h_exponent },
            stderr: ExponentPair { mu: *mu_stderr, h: *h_stderr },
            residual_rms: Some(*residual_rms),
            collinear: Some(*collinear),
            note: if *collinear {
                "log mu and log h collinear along the ladder; h exponent absorbs the mu scaling"
                    .into()
            } else {
                String::new()
            },
        },
        FitOutcome::DiscretizationLimited { usable_points, required, reason } => FitSummaryFile {
            schema_version: crate::SCHEMA_VERSION,
            limited_flag: true,
            n_points: *usable_points,
            exponents: ExponentPair { mu: None, h: None },
            stderr: ExponentPair { mu: None, h: None },
            residual_rms: None,
            collinear: None,
            note: format!("discretization-limited: {reason} (need {required})"),
        },
    };
    let mut bytes = serde_json::to_vec_pretty(&file).expect("fit summary serialization");
    bytes.push(b'\n');
    bytes
}

// ─────────────────────────────────────────────────────────────────────────
// Classification atlas
// ─────────────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct AtlasEntry {
    pub index: Vec<usize>,
    pub classification: PointClassification,
    /// |grad (f1/f2)| by central differences; minima localize critical
    /// points of the intensity ratio.
    pub ratio_grad_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Atlas {
    pub schema_version: u32,
    pub dims: Vec<usize>,
    pub entries: Vec<AtlasEntry>,
    /// Fraction of cells within 1e-6 relative of the degenerate set f1 = f2.
    pub sigma_fraction: f64,
    /// Fraction of cells carrying at least one low-order resonance.
    pub resonant_fraction: f64,
    pub notes: Vec<String>,
}

/// Classify the family on a cell-centered grid of `per_axis` points per
/// axis; (mu, h) are taken from the first sweep point (the atlas geometry
/// itself is h-independent, but ellipticity gaps and scaling functions need
/// parameters).
pub fn classify_domain(spec: &SweepSpec, per_axis: usize) -> Result<Atlas> {
    if !(2..=32).contains(&per_axis) {
        return Err(Error::InvalidConfig(format!(
            "atlas resolution must lie in [2, 32] cells per axis, got {per_axis}"
        )));
    }
    let pts = spec.all_points();
    let &(mu, h, _) = pts.first().ok_or_else(|| {
        Error::InvalidConfig("atlas needs at least one (mu, h) point".into())
    })?;
    let params = SemiclassicalParams::new(mu, h, spec.tau)?;
    let point = spec.family.realize(&params)?;
    let d = point.domain.dim();
    let lengths = point.domain.lengths.clone();
    let opts = ClassifyOptions::default();

    let total = per_axis.pow(d as u32);
    let entries: Vec<Result<AtlasEntry>> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut idx = vec![0usize; d];
            let mut rem = flat;
            for j in (0..d).rev() {
                idx[j] = rem % per_axis;
                rem /= per_axis;
            }
            let x: Vec<f64> = (0..d)
                .map(|j| (idx[j] as f64 + 0.5) * lengths[j] / per_axis as f64)
                .collect();
            let classification = classify_point(&point.fields, &x, &params, &opts)?;
            let ratio_grad_norm = ratio_gradient_norm(&point.fields, &x, &lengths)?;
            Ok(AtlasEntry { index: idx, classification, ratio_grad_norm })
        })
        .collect();
    let entries: Vec<AtlasEntry> = entries.into_iter().collect::<Result<_>>()?;

    let sigma = entries
        .iter()
        .filter(|e| {
            let c = &e.classification;
            c.sigma_distance <= 1e-6 * c.intensities.f1.max(1e-300)
        })
        .count();
    let resonant = entries.iter().filter(|e| !e.classification.resonances.is_empty()).count();
    Ok(Atlas {
        schema_version: crate::SCHEMA_VERSION,
        dims: vec![per_axis; d],
        sigma_fraction: sigma as f64 / total as f64,
        resonant_fraction: resonant as f64 / total as f64,
        entries,
        notes: point.notes,
    })
}

fn ratio_gradient_norm(fields: &FieldData, x: &[f64], lengths: &[f64]) -> Result<f64> {
    let ratio = |y: &[f64]| -> Result<f64> {
        let ip = fields.intensities(y)?;
        if ip.f2 <= 1e-12 {
            return Err(Error::DegenerateIntensity { f2: ip.f2, x: y.to_vec() });
        }
        Ok(ip.f1 / ip.f2)
    };
    let mut sq = 0.0;
    let mut y = x.to_vec();
    for j in 0..x.len() {
        let eta = fd_step(lengths[j]);
        y[j] = x[j] + eta;
        let fp = ratio(&y)?;
        y[j] = x[j] - eta;
        let fm = ratio(&y)?;
        y[j] = x[j];
        let g = (fp - fm) / (2.0 * eta);
        sq += g * g;
    }
    Ok(sq.sqrt())
}

// ─────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn constant2d_spec(points: Vec<MuH>) -> SweepSpec {
        SweepSpec {
            schema_version: 1,
            family: FamilySpec::Constant2d {
                b: 1.0,
                v0: 1.0,
                lengths: [1.0, 1.0],
                tune_flux: true,
            },
            tau: 0.0,
            points,
            ladder: None,
            grid: GridPolicy::default(),
            psi: None,
            method: MethodChoice::Auto,
            kpm: KpmOptions::default(),
            quad_nodes: Some(32),
            seed: 7,
            cache_dir: None,
            output_dir: None,
        }
    }

    #[test]
    fn toml_spec_round_trips_and_rejects_unknown_keys() {
        let text = r#"
            schema_version = 1
            tau = 0.25
            seed = 11
            method = "auto"

            [family]
            kind = "pilot2d"
            b0 = 1.0
            v0 = 1.0
            v_amp = [0.2, 0.1]
            lengths = [1.0, 1.0]

            [grid]
            oscillation_safety = 3.0
            radius_divisor = 8.0
            min_axis = 4

            [psi]
            kind = "cos-bump"
            center = [0.5, 0.5]
            halfwidth = [0.4, 0.4]

            [[points]]
            mu = 2.0
            h = 0.1

            [ladder]
            c = 1.0
            kappa = 0.25
            h = [0.05, 0.025]
        "#;
        let spec = SweepSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.all_points().len(), 3);
        let ladder_mu = spec.all_points()[1].0;
        assert!((ladder_mu - 0.05f64.powf(-0.25)).abs() < 1e-12);

        // serialize -> deserialize is the identity
        let serialized = toml::to_string(&spec).unwrap();
        let back: SweepSpec = toml::from_str(&serialized).unwrap();
        assert_eq!(spec, back);

        let bad = text.replace("radius_divisor", "radius_diviser");
        assert!(SweepSpec::from_toml_str(&bad).is_err());
    }

    #[test]
    fn grid_plan_refines_with_h_and_respects_caps() {
        let domain = Domain::new(vec![1.0, 1.0], Boundary::PeriodicTorus).unwrap();
        let policy = GridPolicy::default();
        let dims_of = |h: f64| {
            let params = SemiclassicalParams::new(2.0, h, 0.0).unwrap();
            plan_dims(&policy, &domain, &params, 1.0, 1.0, ResolvedMethod::Inertia)
        };
        let (coarse, _) = dims_of(0.2);
        let (fine, _) = dims_of(0.05);
        assert!(fine[0] > coarse[0]);
        let (capped, under) = dims_of(1e-4);
        assert!(under, "an impossible resolution demand must flag the row");
        assert!(capped[0] * capped[1] <= DEFAULT_INERTIA_CAP);
    }

    #[test]
    fn psi_zero_gives_zero_remainder_on_every_row() {
        let mut spec = constant2d_spec(vec![
            MuH { mu: 2.0, h: 0.2 },
            MuH { mu: 3.0, h: 0.15 },
        ]);
        spec.psi = Some(PsiSpec::Constant { value: 0.0 });
        spec.grid.axis_cap = Some(12);
        let fit = run_sweep(&spec).unwrap();
        assert_eq!(fit.rows.len(), 2);
        for row in &fit.rows {
            match &row.outcome {
                RowOutcome::Done(d) => {
                    assert_eq!(d.n_disc, 0.0);
                    assert_eq!(d.main_term, 0.0);
                    assert_eq!(d.remainder, 0.0);
                }
                RowOutcome::Failed { error } => panic!("row failed: {error}"),
            }
        }
        assert!(matches!(fit.fit, FitOutcome::DiscretizationLimited { .. }));
    }

    #[test]
    fn separable_constant_family_count_matches_integral_between_clusters() {
        // flux-tuned torus, tau in the gap above the lowest Landau cluster:
        // the count is nu1 * nu2 and the integrated magnetic density equals
        // it exactly, so the remainder collapses to quadrature rounding
        let mu = 4.0;
        let h = 0.05;
        let b = 2.0 * std::f64::consts::PI * h / mu; // one quantum per plane
        let e00 = 0.5 * (mu * h * (b + 2.0 * b) - 1.0);
        let gap_tau = e00 + 0.5 * mu * h * b;
        let spec = SweepSpec {
            schema_version: 1,
            family: FamilySpec::Constant {
                b1: b,
                b2: 2.0 * b,
                v0: 1.0,
                lengths: [1.0; 4],
                tune_flux: true,
            },
            tau: gap_tau,
            points: vec![MuH { mu, h }],
            ladder: None,
            grid: GridPolicy { axis_cap: Some(8), ..GridPolicy::default() },
            psi: None,
            method: MethodChoice::Auto,
            kpm: KpmOptions::default(),
            quad_nodes: Some(8),
            seed: 7,
            cache_dir: None,
            output_dir: None,
        };
        let fit = run_sweep(&spec).unwrap();
        let RowOutcome::Done(d) = &fit.rows[0].outcome else {
            panic!("row failed: {:?}", fit.rows[0].outcome)
        };
        assert_eq!(d.method, "separable-dense");
        // nu1 = 1, nu2 = 2: one filled level per plane pair
        assert_eq!(d.n_disc, 2.0);
        assert!(
            d.remainder <= 1e-9 * d.main_term.max(1.0),
            "remainder {} against main term {}",
            d.remainder,
            d.main_term
        );
    }

    #[test]
    fn psi_negation_flips_main_term_and_weighted_count_exactly() {
        let mut spec = constant2d_spec(vec![MuH { mu: 2.0, h: 0.15 }]);
        spec.family = FamilySpec::Pilot2d {
            b0: 1.0,
            v0: 1.0,
            v_amp: [0.2, 0.1],
            lengths: [1.0, 1.0],
        };
        spec.psi = Some(PsiSpec::CosBump {
            center: vec![0.5, 0.5],
            halfwidth: vec![0.35, 0.35],
            power: 2,
            scale: 1.0,
        });
        spec.kpm = KpmOptions { moments: 128, probes: 8 };
        spec.grid.axis_cap = Some(16);
        spec.quad_nodes = Some(16);
        let plus = run_sweep(&spec).unwrap();
        spec.psi = Some(spec.psi.as_ref().unwrap().negated());
        let minus = run_sweep(&spec).unwrap();
        let (RowOutcome::Done(p), RowOutcome::Done(m)) =
            (&plus.rows[0].outcome, &minus.rows[0].outcome)
        else {
            panic!("a row failed")
        };
        assert_eq!(p.method, "weighted-kpm");
        assert!(p.main_term > 0.0, "bump cutoff must weight a positive mass");
        assert_eq!(p.main_term, -m.main_term);
        assert_eq!(p.n_disc, -m.n_disc);
        assert_eq!(p.remainder, m.remainder);
    }

    #[test]
    fn rerun_and_cache_delete_are_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = tmp.path().join("cache");
        let out = tmp.path().join("out");
        let mut spec = constant2d_spec(vec![
            MuH { mu: 2.0, h: 0.2 },
            MuH { mu: 2.0, h: 0.15 },
        ]);
        spec.grid.axis_cap = Some(10);
        spec.cache_dir = Some(cache.clone());
        spec.output_dir = Some(out.clone());

        let read_all = |dir: &Path| -> Vec<(String, Vec<u8>)> {
            let mut files = Vec::new();
            let mut stack = vec![dir.to_path_buf()];
            while let Some(d) = stack.pop() {
                for e in fs::read_dir(&d).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        files.push((
                            p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(),
                            fs::read(&p).unwrap(),
                        ));
                    }
                }
            }
            files.sort();
            files
        };

        let first = run_sweep(&spec).unwrap();
        let snap1 = read_all(&out);
        assert!(fs::read_dir(&cache).unwrap().count() >= 2, "cache must hold the points");

        // warm rerun: served from cache, identical artifacts and rows
        let second = run_sweep(&spec).unwrap();
        assert_eq!(first, second);
        assert_eq!(snap1, read_all(&out));

        // cold rerun: delete the cache, recompute, still identical
        fs::remove_dir_all(&cache).unwrap();
        let third = run_sweep(&spec).unwrap();
        assert_eq!(first, third);
        assert_eq!(snap1, read_all(&out));
    }

    fn synthetic_row(mu: f64, h: f64, remainder: f64, disc: f64, on_ladder: bool) -> SweepRow {
        SweepRow {
            mu,
            h,
            on_ladder,
            outcome: RowOutcome::Done(RowData {
                dims: vec![8, 8],
                method: "dense".into(),
                n_disc: remainder,
                n_disc_stderr: None,
                main_term: 0.0,
                corrected_term: 0.0,
                remainder,
                corrected_remainder: remainder,
                disc_error_estimate: disc,
                quadrature_error_estimate: 0.0,
                under_resolved: false,
                notes: Vec::new(),
            }),
        }
    }

    #[test]
    fn fit_recovers_planted_exponents() {
        let mut rows = Vec::new();
        let mus = [2.0f64, 4.0, 8.0, 2.0, 4.0, 8.0];
        let hs = [0.1f64, 0.1, 0.1, 0.05, 0.05, 0.05];
        for (i, (&mu, &h)) in mus.iter().zip(&hs).enumerate() {
            let r = 3.0 * mu.powf(-1.0) * h.powf(-2.0) * (1.0 + 0.01 * (i as f64).sin());
            rows.push(synthetic_row(mu, h, r, 1e-9, false));
        }
        let FitOutcome::Exponents { mu_exponent, h_exponent, collinear, .. } =
            fit_remainders(&rows, false)
        else {
            panic!("expected exponents")
        };
        assert!(!collinear);
        assert!((mu_exponent.unwrap() + 1.0).abs() < 0.05);
        assert!((h_exponent.unwrap() + 2.0).abs() < 0.05);
    }

    #[test]
    fn collinear_ladder_reports_only_the_h_exponent() {
        // mu = h^-0.5, R = mu^-1 h^-1 => R = h^-0.5
        let mut rows = Vec::new();
        for &h in &[0.2f64, 0.1, 0.05, 0.025, 0.0125] {
            let mu = h.powf(-0.5);
            rows.push(synthetic_row(mu, h, mu.powf(-1.0) * h.powf(-1.0), 1e-9, true));
        }
        let FitOutcome::Exponents { mu_exponent, h_exponent, collinear, .. } =
            fit_remainders(&rows, true)
        else {
            panic!("expected exponents")
        };
        assert!(collinear);
        assert!(mu_exponent.is_none());
        assert!((h_exponent.unwrap() + 0.5).abs() < 1e-6);
    }

    #[test]
    fn screen_marks_noise_dominated_sweeps_as_limited() {
        let rows: Vec<SweepRow> = (0..6)
            .map(|i| synthetic_row(2.0 + i as f64, 0.1, 1.0, 0.5, false))
            .collect();
        match fit_remainders(&rows, false) {
            FitOutcome::DiscretizationLimited { usable_points, .. } => {
                assert_eq!(usable_points, 0)
            }
            other => panic!("expected discretization-limited, got {other:?}"),
        }
    }

    #[test]
    fn failed_flux_point_is_marked_and_the_sweep_continues() {
        let good_h = 3.0 / (10.0 * std::f64::consts::PI); // 5 quanta at mu = 3
        let mut spec = constant2d_spec(vec![
            MuH { mu: 3.0, h: good_h },
            MuH { mu: 3.0, h: 0.1 }, // 4.77 quanta: rejected by the torus
        ]);
        spec.family = FamilySpec::Constant2d {
            b: 1.0,
            v0: 1.0,
            lengths: [1.0, 1.0],
            tune_flux: false,
        };
        spec.grid.axis_cap = Some(12);
        let fit = run_sweep(&spec).unwrap();
        assert!(matches!(fit.rows[0].outcome, RowOutcome::Done(_)));
        match &fit.rows[1].outcome {
            RowOutcome::Failed { error } => {
                assert!(error.contains("flux"), "unexpected failure text: {error}")
            }
            RowOutcome::Done(_) => panic!("non-quantized flux must fail the point"),
        }
    }

    #[test]
    fn pilot_point_tracks_the_integral_within_coarse_tolerance() {
        let mut spec = constant2d_spec(vec![MuH { mu: 2.0, h: 1.0 / 16.0 }]);
        spec.family = FamilySpec::Pilot2d {
            b0: 1.0,
            v0: 1.0,
            v_amp: [0.15, 0.1],
            lengths: [1.0, 1.0],
        };
        spec.tau = 0.1;
        spec.method = MethodChoice::Inertia;
        spec.grid.axis_cap = Some(72);
        spec.quad_nodes = Some(64);
        let fit = run_sweep(&spec).unwrap();
        let RowOutcome::Done(d) = &fit.rows[0].outcome else { panic!("row failed") };
        assert!(d.main_term > 10.0, "expected a macroscopic count, got {}", d.main_term);
        assert!(
            d.remainder <= 0.2 * d.main_term,
            "count {} strays from integral {}",
            d.n_disc,
            d.main_term
        );
    }

    #[test]
    fn tilted_box_realizes_an_affine_potential_and_guards_positivity() {
        let params = SemiclassicalParams::new(2.0, 0.1, 0.0).unwrap();
        let spec = FamilySpec::Tilted2d {
            b: 1.0,
            v0: 0.06,
            tilt: [0.03, 0.02],
            lengths: [1.0, 1.0],
        };
        let point = spec.realize(&params).unwrap();
        assert_eq!(point.domain.boundary, Boundary::DirichletBox);
        assert!(!point.separable);
        let c = point.domain.center();
        assert!((point.fields.potential_at(&c) - 0.06).abs() < 1e-12);
        let dx = point.fields.potential_at(&[c[0] + 0.25, c[1]]) - 0.06;
        assert!((dx - 0.03 * 0.25).abs() < 1e-12);

        // v0 - (|t1| L1 + |t2| L2)/2 = 0.035 - 0.045 < 0: rejected
        let bad = FamilySpec::Tilted2d {
            b: 1.0,
            v0: 0.035,
            tilt: [0.05, 0.04],
            lengths: [1.0, 1.0],
        };
        assert!(bad.realize(&params).is_err());
        let flat = FamilySpec::Tilted2d {
            b: 0.0,
            v0: 1.0,
            tilt: [0.0, 0.0],
            lengths: [1.0, 1.0],
        };
        assert!(flat.realize(&params).is_err());
    }

    #[test]
    fn atlas_flags_the_constant_ratio_two_resonance_everywhere() {
        let spec = SweepSpec {
            family: FamilySpec::Constant {
                b1: 2.0,
                b2: 1.0,
                v0: 1.0,
                lengths: [1.0; 4],
                tune_flux: false,
            },
            ..constant2d_spec(vec![MuH { mu: 4.0, h: 0.05 }])
        };
        let atlas = classify_domain(&spec, 3).unwrap();
        assert_eq!(atlas.entries.len(), 81);
        assert!((atlas.resonant_fraction - 1.0).abs() < 1e-12);
        for e in &atlas.entries {
            let r = &e.classification.resonances;
            assert!(
                r.iter().any(|q| q.k == 1 && q.l == 2),
                "missing (1,2) resonance at {:?}",
                e.classification.x
            );
            assert!(e.ratio_grad_norm < 1e-6);
        }
        assert_eq!(atlas.sigma_fraction, 0.0);
    }

    #[test]
    fn atlas_marks_equal_intensities_as_degenerate_everywhere() {
        let spec = SweepSpec {
            family: FamilySpec::Constant {
                b1: 1.5,
                b2: 1.5,
                v0: 1.0,
                lengths: [1.0; 4],
                tune_flux: false,
            },
            ..constant2d_spec(vec![MuH { mu: 4.0, h: 0.05 }])
        };
        let atlas = classify_domain(&spec, 3).unwrap();
        assert!((atlas.sigma_fraction - 1.0).abs() < 1e-12);
        for e in &atlas.entries {
            assert_eq!(e.classification.sigma_distance, 0.0);
        }
    }

    #[test]
    fn atlas_localizes_the_ratio_critical_point_to_one_cell() {
        let center = [0.52, 0.41, 0.5, 0.62];
        let spec = SweepSpec {
            family: FamilySpec::RatioWell {
                b1: 2.0,
                b2: 1.0,
                eps: 0.4,
                v0: 1.0,
                center,
                lengths: [1.0; 4],
            },
            ..constant2d_spec(vec![MuH { mu: 4.0, h: 0.05 }])
        };
        let per_axis = 7;
        let atlas = classify_domain(&spec, per_axis).unwrap();
        let best = atlas
            .entries
            .iter()
            .min_by(|a, b| a.ratio_grad_norm.total_cmp(&b.ratio_grad_norm))
            .unwrap();
        let expected: Vec<usize> = center
            .iter()
            .map(|c| ((c * per_axis as f64).floor() as usize).min(per_axis - 1))
            .collect();
        assert_eq!(best.index, expected, "critical point must land in its own cell");
    }
}
