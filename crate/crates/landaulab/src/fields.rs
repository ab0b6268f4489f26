//! Field data: metric, gauge, and potential families over a 2-D or 4-D box
//! or torus, with analytic derivatives.
//!
//! Everything the rest of the crate needs from a field configuration flows
//! through [`FieldData`]:
//!
//! * the inverse-metric matrix `g^{jk}(x)` (SPD) and its first derivatives,
//! * the gauge `(V_1..V_d)(x)`, its Jacobian `dV_k/dx_j`, and exact or
//!   midpoint line integrals along lattice links,
//! * the scalar potential `V(x)` with gradient and Hessian,
//! * quasi-periodicity data on tori: for each axis `k` a scalar `chi_k` with
//!   `V(x + L_k e_k) = V(x) + grad chi_k(x)`, which is what the lattice
//!   discretization needs to twist wrap-around links.
//!
//! Families are deliberately closed-form (no expression language): constant,
//! affine, trigonometric, and polynomial components composed through a small
//! config registry. All derivatives are analytic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard upper bound on spatial dimension; actual dims are 2 or 4.
pub const MAX_DIM: usize = 4;

pub type Vec4 = [f64; MAX_DIM];
pub type Mat4 = [[f64; MAX_DIM]; MAX_DIM];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Dirichlet box [0, L_1] x ... x [0, L_d].
    DirichletBox,
    /// Torus with periods (L_1, ..., L_d).
    PeriodicTorus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Domain {
    pub lengths: Vec<f64>,
    pub boundary: Boundary,
}

impl Domain {
    pub fn new(lengths: Vec<f64>, boundary: Boundary) -> Result<Self> {
        let d = lengths.len();
        if d != 2 && d != 4 {
            return Err(Error::InvalidConfig(format!("domain must be 2-D or 4-D, got {d}-D")));
        }
        if lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidConfig(format!("domain lengths must be positive: {lengths:?}")));
        }
        Ok(Domain { lengths, boundary })
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lengths.iter().map(|l| 0.5 * l).collect()
    }
}

/// Semiclassical parameters: coupling mu, Planck scale h, spectral level tau.
/// The admissible range is 1 <= mu <= c/h; `validate` enforces it with the
/// caller's constant c.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SemiclassicalParams {
    pub mu: f64,
    pub h: f64,
    #[serde(default)]
    pub tau: f64,
}

impl SemiclassicalParams {
    pub fn new(mu: f64, h: f64, tau: f64) -> Result<Self> {
        let p = SemiclassicalParams { mu, h, tau };
        p.validate(f64::INFINITY)?;
        Ok(p)
    }

    pub fn validate(&self, c: f64) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::BadParameters {
                mu: self.mu,
                h: self.h,
                reason: "h must be positive and finite".into(),
            });
        }
        if !(self.mu >= 1.0) {
            return Err(Error::BadParameters {
                mu: self.mu,
                h: self.h,
                reason: "mu must be >= 1".into(),
            });
        }
        if self.mu > c / self.h {
            return Err(Error::BadParameters {
                mu: self.mu,
                h: self.h,
                reason: format!("mu exceeds c/h with c = {c}"),
            });
        }
        Ok(())
    }

    /// mu * h, the Landau level spacing scale.
    pub fn muh(&self) -> f64 {
        self.mu * self.h
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Scalar function families
// ─────────────────────────────────────────────────────────────────────────

/// One trigonometric mode amp * cos(k . x + phase).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amp: f64,
    pub wave: Vec4,
    pub phase: f64,
}

/// Multivariate polynomial: sum of coeff * x1^e1 ... x4^e4.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Poly {
    pub terms: Vec<(f64, [u8; MAX_DIM])>,
}

impl Poly {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &(c, e) in &self.terms {
            let mut t = c;
            for (j, &ej) in e.iter().enumerate() {
                if ej > 0 {
                    t *= x.get(j).copied().unwrap_or(0.0).powi(ej as i32);
                }
            }
            acc += t;
        }
        acc
    }

    pub fn grad(&self, x: &[f64], out: &mut Vec4) {
        *out = [0.0; MAX_DIM];
        for &(c, e) in &self.terms {
            for j in 0..x.len() {
                if e[j] == 0 {
                    continue;
                }
                let mut t = c * e[j] as f64;
                for (m, &em) in e.iter().enumerate() {
                    let p = if m == j { em - 1 } else { em };
                    if p > 0 {
                        t *= x.get(m).copied().unwrap_or(0.0).powi(p as i32);
                    }
                }
                out[j] += t;
            }
        }
    }

    pub fn hess(&self, x: &[f64], out: &mut Mat4) {
        *out = [[0.0; MAX_DIM]; MAX_DIM];
        for &(c, e) in &self.terms {
            for j in 0..x.len() {
                for k in 0..x.len() {
                    let factor = if j == k {
                        (e[j] as f64) * (e[j] as f64 - 1.0)
                    } else {
                        (e[j] as f64) * (e[k] as f64)
                    };
                    if factor == 0.0 {
                        continue;
                    }
                    let mut t = c * factor;
                    for (m, &em) in e.iter().enumerate() {
                        let mut p = em as i32;
                        if m == j {
                            p -= 1;
                        }
                        if m == k {
                            p -= 1;
                        }
                        if p > 0 {
                            t *= x.get(m).copied().unwrap_or(0.0).powi(p);
                        }
                    }
                    out[j][k] += t;
                }
            }
        }
    }

    /// Max total degree, for exact quadrature decisions.
    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|(_, e)| e.iter().map(|&x| x as u32).sum())
            .max()
            .unwrap_or(0)
    }
}

/// A closed-form scalar function with analytic derivatives.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ScalarFn {
    Constant(f64),
    /// c0 + grad . x
    Affine { c0: f64, grad: Vec4 },
    Poly(Poly),
    /// c0 + sum of trig terms
    TrigSum { c0: f64, terms: Vec<TrigTerm> },
}

impl ScalarFn {
    pub fn zero() -> Self {
        ScalarFn::Constant(0.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ScalarFn::Constant(c) => *c,
            ScalarFn::Affine { c0, grad } => {
                c0 + x.iter().zip(grad).map(|(xi, gi)| xi * gi).sum::<f64>()
            }
            ScalarFn::Poly(p) => p.eval(x),
            ScalarFn::TrigSum { c0, terms } => {
                let mut acc = *c0;
                for t in terms {
                    let arg: f64 =
                        x.iter().zip(&t.wave).map(|(xi, ki)| xi * ki).sum::<f64>() + t.phase;
                    acc += t.amp * arg.cos();
                }
                acc
            }
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec4 {
        let mut g = [0.0; MAX_DIM];
        match self {
            ScalarFn::Constant(_) => {}
            ScalarFn::Affine { grad, .. } => g = *grad,
            ScalarFn::Poly(p) => p.grad(x, &mut g),
            ScalarFn::TrigSum { terms, .. } => {
                for t in terms {
                    let arg: f64 =
                        x.iter().zip(&t.wave).map(|(xi, ki)| xi * ki).sum::<f64>() + t.phase;
                    let s = -t.amp * arg.sin();
                    for j in 0..x.len() {
                        g[j] += s * t.wave[j];
                    }
                }
            }
        }
        g
    }

    pub fn hess(&self, x: &[f64]) -> Mat4 {
        let mut hm = [[0.0; MAX_DIM]; MAX_DIM];
        match self {
            ScalarFn::Constant(_) | ScalarFn::Affine { .. } => {}
            ScalarFn::Poly(p) => p.hess(x, &mut hm),
            ScalarFn::TrigSum { terms, .. } => {
                for t in terms {
                    let arg: f64 =
                        x.iter().zip(&t.wave).map(|(xi, ki)| xi * ki).sum::<f64>() + t.phase;
                    let c = -t.amp * arg.cos();
                    for j in 0..x.len() {
                        for k in 0..x.len() {
                            hm[j][k] += c * t.wave[j] * t.wave[k];
                        }
                    }
                }
            }
        }
        hm
    }

    /// Is this function periodic with the given periods (up to an exactly
    /// representable commensurability check)?
    pub fn is_periodic(&self, lengths: &[f64]) -> bool {
        match self {
            ScalarFn::Constant(_) => true,
            ScalarFn::Affine { grad, .. } => grad.iter().take(lengths.len()).all(|&g| g == 0.0),
            ScalarFn::Poly(p) => p
                .terms
                .iter()
                .all(|&(c, e)| c == 0.0 || e.iter().take(lengths.len()).all(|&ej| ej == 0)),
            ScalarFn::TrigSum { terms, .. } => terms.iter().all(|t| {
                t.wave.iter().zip(lengths).all(|(&k, &l)| {
                    let cycles = k * l / (2.0 * std::f64::consts::PI);
                    (cycles - cycles.round()).abs() < 1e-9
                })
            }),
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Metric
// ─────────────────────────────────────────────────────────────────────────

/// The inverse metric g^{jk}(x), always SPD.
///
/// The curved family is g^{jk} = (I + S)(I + S)^T with S a small matrix of
/// scalar functions; it stays SPD wherever the spectral norm of S is < 1,
/// which the caller guarantees by keeping amplitudes small.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum MetricField {
    Identity,
    Diagonal(Vec<f64>),
    Curved { s: Vec<Vec<ScalarFn>> },
}

impl MetricField {
    pub fn eval(&self, dim: usize, x: &[f64], g: &mut Mat4) {
        *g = [[0.0; MAX_DIM]; MAX_DIM];
        match self {
            MetricField::Identity => {
                for j in 0..dim {
                    g[j][j] = 1.0;
                }
            }
            MetricField::Diagonal(dv) => {
                for j in 0..dim {
                    g[j][j] = dv[j];
                }
            }
            MetricField::Curved { s } => {
                let mut a = [[0.0; MAX_DIM]; MAX_DIM];
                for j in 0..dim {
                    for k in 0..dim {
                        a[j][k] = s[j][k].eval(x) + if j == k { 1.0 } else { 0.0 };
                    }
                }
                for j in 0..dim {
                    for k in 0..dim {
                        let mut acc = 0.0;
                        for m in 0..dim {
                            acc += a[j][m] * a[k][m];
                        }
                        g[j][k] = acc;
                    }
                }
            }
        }
    }

    /// d g^{jk} / d x_m for all (j,k,m); out[m][j][k].
    pub fn grad(&self, dim: usize, x: &[f64], out: &mut [Mat4; MAX_DIM]) {
        *out = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
        if let MetricField::Curved { s } = self {
            let mut a = [[0.0; MAX_DIM]; MAX_DIM];
            let mut da = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM]; // da[m][j][k]
            for j in 0..dim {
                for k in 0..dim {
                    a[j][k] = s[j][k].eval(x) + if j == k { 1.0 } else { 0.0 };
                    let gr = s[j][k].grad(x);
                    for m in 0..dim {
                        da[m][j][k] = gr[m];
                    }
                }
            }
            for m in 0..dim {
                for j in 0..dim {
                    for k in 0..dim {
                        let mut acc = 0.0;
                        for l in 0..dim {
                            acc += da[m][j][l] * a[k][l] + a[j][l] * da[m][k][l];
                        }
                        out[m][j][k] = acc;
                    }
                }
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            MetricField::Identity | MetricField::Diagonal(_) => true,
            MetricField::Curved { s } => s
                .iter()
                .flatten()
                .all(|f| matches!(f, ScalarFn::Constant(_))),
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Gauge
// ─────────────────────────────────────────────────────────────────────────

/// Magnetic gauge (V_1..V_d), each component a closed-form scalar.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaugeField {
    pub components: Vec<ScalarFn>,
}

impl GaugeField {
    /// Uniform-field gauge in Landau form: for 4-D, V_2 = b1 x_1 and
    /// V_4 = b2 x_3 give F_12 = b1, F_34 = b2; for 2-D, V_2 = b x_1.
    pub fn uniform(dim: usize, b: &[f64]) -> Self {
        assert_eq!(b.len(), dim / 2);
        let mut components = vec![ScalarFn::zero(); dim];
        for (blk, &bv) in b.iter().enumerate() {
            let mut grad = [0.0; MAX_DIM];
            grad[2 * blk] = bv;
            components[2 * blk + 1] = ScalarFn::Affine { c0: 0.0, grad };
        }
        GaugeField { components }
    }

    /// Affine gauge V_k = c_k + sum_m A[k][m] x_m (constant field F = A^T - A
    /// in the sense F_{jk} = A[k][j] - A[j][k]).
    pub fn affine(dim: usize, a: &[[f64; MAX_DIM]], c: &[f64]) -> Self {
        let components = (0..dim)
            .map(|k| ScalarFn::Affine { c0: c[k], grad: a[k] })
            .collect();
        GaugeField { components }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn eval(&self, x: &[f64], out: &mut Vec4) {
        *out = [0.0; MAX_DIM];
        for (k, f) in self.components.iter().enumerate() {
            out[k] = f.eval(x);
        }
    }

    /// jac[j][k] = d V_k / d x_j.
    pub fn jacobian(&self, x: &[f64], jac: &mut Mat4) {
        *jac = [[0.0; MAX_DIM]; MAX_DIM];
        for (k, f) in self.components.iter().enumerate() {
            let g = f.grad(x);
            for j in 0..self.dim() {
                jac[j][k] = g[j];
            }
        }
    }

    /// Midpoint-rule line integral of V_j along the segment from x to
    /// x + step e_axis: step * V_axis(midpoint). Exact for affine components.
    pub fn link_integral(&self, x: &[f64], axis: usize, step: f64) -> f64 {
        let mut mid = [0.0; MAX_DIM];
        mid[..x.len()].copy_from_slice(x);
        mid[axis] += 0.5 * step;
        step * self.components[axis].eval(&mid[..x.len()])
    }

    /// Quasi-periodicity jump along axis k on a torus of the given lengths:
    /// chi_k with V(x + L_k e_k) = V(x) + grad chi_k(x), or an error when the
    /// gauge is not torus-compatible (components neither periodic nor affine).
    pub fn torus_jump(&self, lengths: &[f64], k: usize) -> Result<ScalarFn> {
        let dim = self.dim();
        let lk = lengths[k];
        let mut jump_grad = [0.0; MAX_DIM];
        let mut any = false;
        for (j, f) in self.components.iter().enumerate() {
            match f {
                ScalarFn::Constant(_) => {}
                ScalarFn::Affine { grad, .. } => {
                    if grad[k] != 0.0 {
                        jump_grad[j] = grad[k] * lk;
                        any = true;
                    }
                }
                ScalarFn::TrigSum { terms, .. } => {
                    for t in terms {
                        let cycles = t.wave[k] * lk / (2.0 * std::f64::consts::PI);
                        if (cycles - cycles.round()).abs() > 1e-9 {
                            return Err(Error::InvalidConfig(format!(
                                "gauge component {j} has a trig mode incommensurate with the torus period along axis {k}"
                            )));
                        }
                    }
                }
                ScalarFn::Poly(p) => {
                    let depends =
                        p.terms.iter().any(|&(c, e)| c != 0.0 && e[k] > 0 && e.iter().any(|&x| x > 0));
                    if depends {
                        return Err(Error::InvalidConfig(format!(
                            "polynomial gauge component {j} is not periodic along axis {k}; polynomial gauges are Dirichlet-only"
                        )));
                    }
                }
            }
        }
        let _ = dim;
        if any {
            Ok(ScalarFn::Affine { c0: 0.0, grad: jump_grad })
        } else {
            Ok(ScalarFn::Constant(0.0))
        }
    }

    /// Add the gradient of a polynomial chi to the gauge (gauge transformation).
    pub fn with_gauge_shift(&self, chi: &Poly) -> GaugeField {
        let dim = self.dim();
        let mut components = self.components.clone();
        for (j, comp) in components.iter_mut().enumerate().take(dim) {
            // d chi / d x_j as a polynomial
            let mut dterms = Vec::new();
            for &(c, e) in &chi.terms {
                if e[j] > 0 {
                    let mut e2 = e;
                    e2[j] -= 1;
                    dterms.push((c * e[j] as f64, e2));
                }
            }
            let dpoly = Poly { terms: dterms };
            *comp = add_scalar_fns(comp, &ScalarFn::Poly(dpoly));
        }
        GaugeField { components }
    }
}

/// Pointwise sum of two scalar functions, staying closed-form where easy and
/// falling back to polynomial merging (panics if incompatible kinds that have
/// no closed-form sum are mixed; callers only mix affine/poly).
fn add_scalar_fns(a: &ScalarFn, b: &ScalarFn) -> ScalarFn {
    fn to_poly(f: &ScalarFn) -> Option<Poly> {
        match f {
            ScalarFn::Constant(c) => Some(Poly { terms: vec![(*c, [0; MAX_DIM])] }),
            ScalarFn::Affine { c0, grad } => {
                let mut terms = vec![(*c0, [0; MAX_DIM])];
                for (j, &g) in grad.iter().enumerate() {
                    if g != 0.0 {
                        let mut e = [0u8; MAX_DIM];
                        e[j] = 1;
                        terms.push((g, e));
                    }
                }
                Some(Poly { terms })
            }
            ScalarFn::Poly(p) => Some(p.clone()),
            ScalarFn::TrigSum { .. } => None,
        }
    }
    match (to_poly(a), to_poly(b)) {
        (Some(mut pa), Some(pb)) => {
            pa.terms.extend(pb.terms);
            ScalarFn::Poly(pa)
        }
        _ => match (a, b) {
            (ScalarFn::TrigSum { c0, terms }, ScalarFn::Constant(c)) => ScalarFn::TrigSum {
                c0: c0 + c,
                terms: terms.clone(),
            },
            (ScalarFn::Constant(c), ScalarFn::TrigSum { c0, terms }) => ScalarFn::TrigSum {
                c0: c0 + c,
                terms: terms.clone(),
            },
            (ScalarFn::TrigSum { c0: ca, terms: ta }, ScalarFn::TrigSum { c0: cb, terms: tb }) => {
                let mut terms = ta.clone();
                terms.extend(tb.clone());
                ScalarFn::TrigSum { c0: ca + cb, terms }
            }
            _ => panic!("no closed-form sum for these scalar function kinds"),
        },
    }
}

// ─────────────────────────────────────────────────────────────────────────
// FieldData
// ─────────────────────────────────────────────────────────────────────────

/// A complete field configuration: inverse metric, gauge, scalar potential.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldData {
    pub dim: usize,
    pub metric: MetricField,
    pub gauge: GaugeField,
    pub potential: ScalarFn,
}

impl FieldData {
    pub fn new(dim: usize, metric: MetricField, gauge: GaugeField, potential: ScalarFn) -> Result<Self> {
        if dim != 2 && dim != 4 {
            return Err(Error::InvalidConfig(format!("fields must be 2-D or 4-D, got {dim}")));
        }
        if gauge.dim() != dim {
            return Err(Error::InvalidConfig(format!(
                "gauge has {} components, expected {dim}",
                gauge.dim()
            )));
        }
        if let MetricField::Diagonal(dv) = &metric {
            if dv.len() != dim || dv.iter().any(|&v| v <= 0.0) {
                return Err(Error::InvalidConfig("diagonal metric needs positive entries per axis".into()));
            }
        }
        if let MetricField::Curved { s } = &metric {
            if s.len() != dim || s.iter().any(|row| row.len() != dim) {
                return Err(Error::InvalidConfig("curved metric S must be dim x dim".into()));
            }
        }
        Ok(FieldData { dim, metric, gauge, potential })
    }

    /// Uniform field of per-block intensities b with identity metric and
    /// constant potential v0: the exactly solvable reference configuration.
    pub fn uniform(dim: usize, b: &[f64], v0: f64) -> Self {
        FieldData {
            dim,
            metric: MetricField::Identity,
            gauge: GaugeField::uniform(dim, b),
            potential: ScalarFn::Constant(v0),
        }
    }

    pub fn metric_at(&self, x: &[f64], g: &mut Mat4) {
        self.metric.eval(self.dim, x, g);
    }

    /// sqrt g = det(g^{jk})^{-1/2}, the Riemannian volume density.
    pub fn sqrt_g(&self, x: &[f64]) -> f64 {
        let mut g = [[0.0; MAX_DIM]; MAX_DIM];
        self.metric.eval(self.dim, x, &mut g);
        det_dim(&g, self.dim).recip().sqrt()
    }

    /// Magnetic 2-form F_{jk} = d_j V_k - d_k V_j.
    pub fn magnetic_form(&self, x: &[f64], f: &mut Mat4) {
        let mut jac = [[0.0; MAX_DIM]; MAX_DIM];
        self.gauge.jacobian(x, &mut jac);
        for j in 0..self.dim {
            for k in 0..self.dim {
                f[j][k] = jac[j][k] - jac[k][j];
            }
        }
        for j in self.dim..MAX_DIM {
            for k in 0..MAX_DIM {
                f[j][k] = 0.0;
                f[k][j] = 0.0;
            }
        }
    }

    pub fn potential_at(&self, x: &[f64]) -> f64 {
        self.potential.eval(x)
    }

    /// Is the whole configuration (g, F, V) invariant along every axis of the
    /// given torus? (Gauge may be quasi-periodic; what must be periodic are
    /// its derivatives, i.e. affine parts are fine.)
    pub fn torus_compatible(&self, domain: &Domain) -> Result<()> {
        if domain.boundary != Boundary::PeriodicTorus {
            return Ok(());
        }
        let ls = &domain.lengths;
        if !self.potential.is_periodic(ls) {
            return Err(Error::InvalidConfig("potential is not periodic on the torus".into()));
        }
        let metric_periodic = match &self.metric {
            MetricField::Identity | MetricField::Diagonal(_) => true,
            MetricField::Curved { s } => s.iter().flatten().all(|f| f.is_periodic(ls)),
        };
        if !metric_periodic {
            return Err(Error::InvalidConfig("metric is not periodic on the torus".into()));
        }
        for k in 0..self.dim {
            self.gauge.torus_jump(ls, k)?;
        }
        Ok(())
    }
}

/// Determinant of the upper dim x dim block.
pub fn det_dim(m: &Mat4, dim: usize) -> f64 {
    match dim {
        2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
        4 => {
            // Cofactor expansion via 2x2 complements (Laplace along first two rows).
            let det2 = |a: f64, b: f64, c: f64, d: f64| a * d - b * c;
            let s0 = det2(m[0][0], m[0][1], m[1][0], m[1][1]);
            let s1 = det2(m[0][0], m[0][2], m[1][0], m[1][2]);
            let s2 = det2(m[0][0], m[0][3], m[1][0], m[1][3]);
            let s3 = det2(m[0][1], m[0][2], m[1][1], m[1][2]);
            let s4 = det2(m[0][1], m[0][3], m[1][1], m[1][3]);
            let s5 = det2(m[0][2], m[0][3], m[1][2], m[1][3]);
            let c5 = det2(m[2][2], m[2][3], m[3][2], m[3][3]);
            let c4 = det2(m[2][1], m[2][3], m[3][1], m[3][3]);
            let c3 = det2(m[2][1], m[2][2], m[3][1], m[3][2]);
            let c2 = det2(m[2][0], m[2][3], m[3][0], m[3][3]);
            let c1 = det2(m[2][0], m[2][2], m[3][0], m[3][2]);
            let c0 = det2(m[2][0], m[2][1], m[3][0], m[3][1]);
            s0 * c5 - s1 * c4 + s2 * c3 + s3 * c2 - s4 * c1 + s5 * c0
        }
        d => panic!("det_dim: unsupported dimension {d}"),
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Config registry
// ─────────────────────────────────────────────────────────────────────────

/// Declarative field configuration, the text-facing registry of families.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub dim: usize,
    pub metric: MetricConfig,
    pub gauge: GaugeConfig,
    pub potential: PotentialConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MetricConfig {
    Identity,
    Diagonal { scale: Vec<f64> },
    CurvedTrig {
        /// S[j][k] = amp * cos(2 pi modes . x / lengths + phase), per entry.
        entries: Vec<CurvedEntry>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvedEntry {
    pub row: usize,
    pub col: usize,
    pub amp: f64,
    pub modes: Vec<i32>,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GaugeConfig {
    /// Per-block constant intensities (len dim/2).
    Uniform { b: Vec<f64> },
    /// V_k = c[k] + sum_m a[k][m] x_m; a is row-major dim x dim.
    Affine { a: Vec<Vec<f64>>, #[serde(default)] c: Vec<f64> },
    /// Periodic gauge: per component a list of trig modes (integer mode
    /// numbers per axis, scaled by 2 pi / L at instantiation).
    Trig { components: Vec<Vec<TrigModeConfig>> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigModeConfig {
    pub amp: f64,
    pub modes: Vec<i32>,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialConfig {
    Constant { v0: f64 },
    Affine { v0: f64, slope: Vec<f64> },
    Trig { v0: f64, terms: Vec<TrigModeConfig> },
    Poly { terms: Vec<PolyTermConfig> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyTermConfig {
    pub coeff: f64,
    pub exponents: Vec<u8>,
}

fn trig_terms_from_config(terms: &[TrigModeConfig], lengths: &[f64]) -> Result<Vec<TrigTerm>> {
    let dim = lengths.len();
    terms
        .iter()
        .map(|t| {
            if t.modes.len() != dim {
                return Err(Error::InvalidConfig(format!(
                    "trig mode has {} indices, expected {dim}",
                    t.modes.len()
                )));
            }
            if !t.amp.is_finite() {
                return Err(Error::InvalidConfig("trig amplitude must be finite".into()));
            }
            let mut wave = [0.0; MAX_DIM];
            for (j, &m) in t.modes.iter().enumerate() {
                wave[j] = 2.0 * std::f64::consts::PI * m as f64 / lengths[j];
            }
            Ok(TrigTerm { amp: t.amp, wave, phase: t.phase })
        })
        .collect()
}

impl FieldConfig {
    /// Instantiate the families on a concrete domain (trig modes need the
    /// periods; everything else is checked for shape and finiteness).
    pub fn build(&self, domain: &Domain) -> Result<FieldData> {
        let dim = self.dim;
        if dim != domain.dim() {
            return Err(Error::InvalidConfig(format!(
                "config dim {dim} does not match domain dim {}",
                domain.dim()
            )));
        }
        let metric = match &self.metric {
            MetricConfig::Identity => MetricField::Identity,
            MetricConfig::Diagonal { scale } => {
                if scale.len() != dim {
                    return Err(Error::InvalidConfig("metric scale length must equal dim".into()));
                }
                MetricField::Diagonal(scale.clone())
            }
            MetricConfig::CurvedTrig { entries } => {
                let mut s = vec![vec![ScalarFn::zero(); dim]; dim];
                for e in entries {
                    if e.row >= dim || e.col >= dim {
                        return Err(Error::InvalidConfig(format!(
                            "curved metric entry ({}, {}) out of range for dim {dim}",
                            e.row, e.col
                        )));
                    }
                    if e.amp.abs() >= 0.5 {
                        return Err(Error::InvalidConfig(
                            "curved metric amplitudes must stay below 0.5 to guarantee SPD".into(),
                        ));
                    }
                    let terms = trig_terms_from_config(
                        &[TrigModeConfig { amp: e.amp, modes: e.modes.clone(), phase: e.phase }],
                        &domain.lengths,
                    )?;
                    s[e.row][e.col] = ScalarFn::TrigSum { c0: 0.0, terms };
                }
                MetricField::Curved { s }
            }
        };
        let gauge = match &self.gauge {
            GaugeConfig::Uniform { b } => {
                if b.len() != dim / 2 {
                    return Err(Error::InvalidConfig(format!(
                        "uniform gauge needs {} block intensities, got {}",
                        dim / 2,
                        b.len()
                    )));
                }
                GaugeField::uniform(dim, b)
            }
            GaugeConfig::Affine { a, c } => {
                if a.len() != dim || a.iter().any(|row| row.len() != dim) {
                    return Err(Error::InvalidConfig("affine gauge matrix must be dim x dim".into()));
                }
                let mut am = [[0.0; MAX_DIM]; MAX_DIM];
                for (k, row) in a.iter().enumerate() {
                    for (m, &v) in row.iter().enumerate() {
                        if !v.is_finite() {
                            return Err(Error::InvalidConfig("affine gauge entries must be finite".into()));
                        }
                        am[k][m] = v;
                    }
                }
                let mut cv = vec![0.0; dim];
                if !c.is_empty() {
                    if c.len() != dim {
                        return Err(Error::InvalidConfig("affine gauge offset must have dim entries".into()));
                    }
                    cv.copy_from_slice(c);
                }
                GaugeField::affine(dim, &am[..dim], &cv)
            }
            GaugeConfig::Trig { components } => {
                if components.len() != dim {
                    return Err(Error::InvalidConfig(format!(
                        "trig gauge needs {dim} component mode lists"
                    )));
                }
                let comps = components
                    .iter()
                    .map(|modes| {
                        Ok(ScalarFn::TrigSum {
                            c0: 0.0,
                            terms: trig_terms_from_config(modes, &domain.lengths)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                GaugeField { components: comps }
            }
        };
        let potential = match &self.potential {
            PotentialConfig::Constant { v0 } => ScalarFn::Constant(*v0),
            PotentialConfig::Affine { v0, slope } => {
                if slope.len() != dim {
                    return Err(Error::InvalidConfig("potential slope must have dim entries".into()));
                }
                let mut grad = [0.0; MAX_DIM];
                grad[..dim].copy_from_slice(slope);
                ScalarFn::Affine { c0: *v0, grad }
            }
            PotentialConfig::Trig { v0, terms } => ScalarFn::TrigSum {
                c0: *v0,
                terms: trig_terms_from_config(terms, &domain.lengths)?,
            },
            PotentialConfig::Poly { terms } => {
                let t = terms
                    .iter()
                    .map(|t| {
                        if t.exponents.len() != dim {
                            return Err(Error::InvalidConfig("poly exponents must have dim entries".into()));
                        }
                        if !t.coeff.is_finite() {
                            return Err(Error::InvalidConfig("poly coefficients must be finite".into()));
                        }
                        let mut e = [0u8; MAX_DIM];
                        e[..dim].copy_from_slice(&t.exponents);
                        Ok((t.coeff, e))
                    })
                    .collect::<Result<Vec<_>>>()?;
                ScalarFn::Poly(Poly { terms: t })
            }
        };
        let data = FieldData::new(dim, metric, gauge, potential)?;
        data.torus_compatible(domain)?;
        Ok(data)
    }
}
