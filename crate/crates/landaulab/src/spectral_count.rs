//! Eigenvalue counting N(tau) = #{lambda <= tau} for Hermitian operators:
//! dense eigendecomposition (oracle tier), LDL^H factorization inertia
//! (exact, sparse), stochastic Chebyshev / kernel polynomial estimation
//! (scales past materializability), and exact convolution of separable
//! factors. The counting convention is closed: lambda <= tau.
//!
//! Determinism: KPM probes draw from counter-based streams keyed by probe
//! index and are reduced in probe order with pairwise summation, so outputs
//! are byte-identical for a fixed seed regardless of the worker-thread count.

use crate::discrete_operator::DiscreteHamiltonian;
use crate::error::{Error, Result};
use crate::fields::Boundary;
use crate::linalg::{self, C64, SparseHermitian};
use crate::numeric::pairwise_sum;
use crate::rng::{stream, StreamKind};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

/// Default dimension cap of [`dense_count`].
pub const DEFAULT_DENSE_CAP: usize = 6_000;
/// Default dimension cap of [`inertia_count`].
pub const DEFAULT_INERTIA_CAP: usize = 300_000;

// ─────────────────────────────────────────────────────────────────────────
// Operator abstraction
// ─────────────────────────────────────────────────────────────────────────

/// Anything that acts like a Hermitian matrix: the discretized operator, an
/// explicit sparse matrix, or small test diagonals.
pub trait HermitianOp: Sync {
    fn dim(&self) -> usize;
    /// out = H u.
    fn apply(&self, u: &[C64], out: &mut [C64]);
    /// Explicit sparse form, if the operator is materializable.
    fn sparse(&self) -> Result<SparseHermitian>;
    /// Dense form; oracle tier only.
    fn dense(&self) -> Result<DMatrix<C64>> {
        Ok(self.sparse()?.to_dense())
    }
    /// Grid shape for fill-reducing orderings, when the operator lives on a
    /// tensor grid: (nodes per axis, per-axis periodicity).
    fn dissection_hint(&self) -> Option<(Vec<usize>, Vec<bool>)> {
        None
    }
}

impl HermitianOp for DiscreteHamiltonian {
    fn dim(&self) -> usize {
        DiscreteHamiltonian::dim(self)
    }
    fn apply(&self, u: &[C64], out: &mut [C64]) {
        DiscreteHamiltonian::apply(self, u, out)
    }
    fn sparse(&self) -> Result<SparseHermitian> {
        self.to_sparse()
    }
    fn dense(&self) -> Result<DMatrix<C64>> {
        self.to_dense()
    }
    fn dissection_hint(&self) -> Option<(Vec<usize>, Vec<bool>)> {
        let periodic = self.grid().boundary() == Boundary::PeriodicTorus;
        Some((self.grid().dims().to_vec(), vec![periodic; self.grid().dim()]))
    }
}

impl HermitianOp for SparseHermitian {
    fn dim(&self) -> usize {
        self.n
    }
    fn apply(&self, u: &[C64], out: &mut [C64]) {
        self.mul_vec(u, out)
    }
    fn sparse(&self) -> Result<SparseHermitian> {
        Ok(self.clone())
    }
}

// ─────────────────────────────────────────────────────────────────────────
// CountingCurve
// ─────────────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountMethod {
    Dense,
    Inertia,
    Kpm,
    /// Diagonal-weighted stochastic count tr(diag(w) theta(tau - H)).
    WeightedKpm,
    Convolved,
}

impl CountMethod {
    fn as_str(self) -> &'static str {
        match self {
            CountMethod::Dense => "dense",
            CountMethod::Inertia => "inertia",
            CountMethod::Kpm => "kpm",
            CountMethod::WeightedKpm => "weighted-kpm",
            CountMethod::Convolved => "convolved",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct KpmMeta {
    pub moments: usize,
    pub probes: usize,
    pub seed: u64,
}

/// N(tau) sampled on a sorted grid. Dense/inertia/convolved counts are exact
/// integers (stored as f64); KPM counts are stochastic estimates with a
/// probe-scatter standard error per point.
#[derive(Clone, Debug, Serialize)]
pub struct CountingCurve {
    pub schema_version: u32,
    pub tau_grid: Vec<f64>,
    pub counts: Vec<f64>,
    /// per-point standard error (stochastic methods only)
    pub stderr: Option<Vec<f64>>,
    pub method: CountMethod,
    /// spectral bounds used or observed (lambda_min, lambda_max)
    pub bounds: (f64, f64),
    /// full sorted spectrum, when the method computed one; required by
    /// [`convolve_counts`]
    pub eigenvalues: Option<Vec<f64>>,
    pub kpm: Option<KpmMeta>,
    pub warnings: Vec<String>,
}

impl CountingCurve {
    /// CSV dump: `tau,count,stderr,method` with a schema comment line.
    pub fn write_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "# schema_version {}", self.schema_version)?;
        writeln!(w, "tau,count,stderr,method")?;
        for (i, (&tau, &c)) in self.tau_grid.iter().zip(&self.counts).enumerate() {
            let se = self.stderr.as_ref().map_or(String::new(), |s| format!("{:.6e}", s[i]));
            writeln!(w, "{tau:.17e},{c:.17e},{se},{}", self.method.as_str())?;
        }
        Ok(())
    }
}

fn validate_tau_grid(tau_grid: &[f64]) -> Result<()> {
    if tau_grid.is_empty() {
        return Err(Error::InvalidConfig("threshold grid is empty".into()));
    }
    if tau_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidConfig("threshold grid contains a non-finite value".into()));
    }
    if tau_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("threshold grid must be sorted ascending".into()));
    }
    Ok(())
}

// ─────────────────────────────────────────────────────────────────────────
// Dense counting
// ─────────────────────────────────────────────────────────────────────────

pub fn dense_count<H: HermitianOp + ?Sized>(h: &H, tau_grid: &[f64]) -> Result<CountingCurve> {
    dense_count_capped(h, tau_grid, DEFAULT_DENSE_CAP)
}

pub fn dense_count_capped<H: HermitianOp + ?Sized>(
    h: &H,
    tau_grid: &[f64],
    cap: usize,
) -> Result<CountingCurve> {
    validate_tau_grid(tau_grid)?;
    let n = h.dim();
    if n > cap {
        return Err(Error::DimensionCap {
            method: "dense_count (use kpm_count or inertia_count above the cap)",
            n,
            cap,
        });
    }
    let mut eigs = linalg::hermitian_eigenvalues(&h.dense()?);
    eigs.sort_by(f64::total_cmp);
    let counts = tau_grid
        .iter()
        .map(|&tau| eigs.partition_point(|&e| e <= tau) as f64)
        .collect();
    let bounds = (eigs[0], eigs[n - 1]);
    Ok(CountingCurve {
        schema_version: crate::SCHEMA_VERSION,
        tau_grid: tau_grid.to_vec(),
        counts,
        stderr: None,
        method: CountMethod::Dense,
        bounds,
        eigenvalues: Some(eigs),
        kpm: None,
        warnings: Vec::new(),
    })
}

// ─────────────────────────────────────────────────────────────────────────
// Lanczos spectral bounds
// ─────────────────────────────────────────────────────────────────────────

/// Extremal eigenvalue estimates by restarted Lanczos with full
/// reorthogonalization, certified by Ritz residuals and padded by 1% of the
/// spread so that the returned interval brackets the spectrum.
pub fn spectral_bounds<H: HermitianOp + ?Sized>(h: &H) -> Result<(f64, f64)> {
    let n = h.dim();
    if n == 0 {
        return Err(Error::InvalidConfig("operator has dimension zero".into()));
    }
    let steps = 64.min(n);
    let mut global_lo = f64::INFINITY;
    let mut global_hi = f64::NEG_INFINITY;
    let mut last_reason = String::new();
    for attempt in 0..5u64 {
        let mut rng = stream(0x5bec7ab0, StreamKind::LanczosStart, attempt);
        let mut v: Vec<C64> =
            (0..n).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
        let nv = linalg::cnorm(&v);
        v.iter_mut().for_each(|z| *z /= nv);

        let mut basis: Vec<Vec<C64>> = vec![v.clone()];
        let mut alphas: Vec<f64> = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        let mut w = vec![C64::new(0.0, 0.0); n];
        let mut happy = false;
        for _ in 0..steps {
            let vk = basis.last().unwrap().clone();
            h.apply(&vk, &mut w);
            let alpha = linalg::cdot(&vk, &w).re;
            alphas.push(alpha);
            // w -= alpha v_k + beta v_{k-1}, then full re-orthogonalization
            linalg::caxpy(C64::new(-alpha, 0.0), &vk, &mut w);
            if basis.len() >= 2 {
                let beta_prev = *betas.last().unwrap();
                linalg::caxpy(C64::new(-beta_prev, 0.0), &basis[basis.len() - 2], &mut w);
            }
            for b in &basis {
                let proj = linalg::cdot(b, &w);
                linalg::caxpy(-proj, b, &mut w);
            }
            let beta = linalg::cnorm(&w);
            let scale = alphas.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1.0);
            if beta <= 1e-13 * scale {
                happy = true; // invariant subspace: Ritz values are exact
                break;
            }
            betas.push(beta);
            let next: Vec<C64> = w.iter().map(|z| z / beta).collect();
            basis.push(next);
        }
        let m = alphas.len();
        let mut tri = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            tri[(i, i)] = alphas[i];
            if i + 1 < m && i < betas.len() {
                tri[(i, i + 1)] = betas[i];
                tri[(i + 1, i)] = betas[i];
            }
        }
        let se = nalgebra::SymmetricEigen::new(tri);
        let mut idx_min = 0;
        let mut idx_max = 0;
        for i in 0..m {
            if se.eigenvalues[i] < se.eigenvalues[idx_min] {
                idx_min = i;
            }
            if se.eigenvalues[i] > se.eigenvalues[idx_max] {
                idx_max = i;
            }
        }
        let theta_min = se.eigenvalues[idx_min];
        let theta_max = se.eigenvalues[idx_max];
        // residual certificate: |H y - theta y| = beta_m |e_m^T v| for Ritz
        // pairs of the tridiagonal section; zero on an invariant subspace
        let beta_last = betas.last().copied().unwrap_or(0.0);
        let res = |idx: usize| -> f64 {
            if happy {
                0.0
            } else {
                (beta_last * se.eigenvectors[(m - 1, idx)]).abs()
            }
        };
        let res_min = res(idx_min);
        let res_max = res(idx_max);
        global_lo = global_lo.min(theta_min - res_min);
        global_hi = global_hi.max(theta_max + res_max);

        let spread = (global_hi - global_lo).max(0.0);
        let scale = global_lo.abs().max(global_hi.abs()).max(1e-300);
        let certified = res_min <= 5e-3 * spread.max(1e-12 * scale)
            && res_max <= 5e-3 * spread.max(1e-12 * scale);
        if certified {
            // 1% pad; on a point spectrum the spread is zero, pad by scale
            let pad = if spread > 1e-12 * scale { 0.01 * spread } else { 0.01 * scale };
            return Ok((global_lo - pad, global_hi + pad));
        }
        last_reason = format!(
            "Ritz residuals {res_min:.3e}/{res_max:.3e} too large after {m} steps (attempt {attempt})"
        );
    }
    Err(Error::NoConvergence { method: "spectral_bounds", reason: last_reason })
}

// ─────────────────────────────────────────────────────────────────────────
// KPM stochastic counting
// ─────────────────────────────────────────────────────────────────────────

/// Jackson damping factors for a `moments`-term Chebyshev expansion.
fn jackson_weights(moments: usize) -> Vec<f64> {
    let np1 = moments as f64 + 1.0;
    let cot = 1.0 / (std::f64::consts::PI / np1).tan();
    (0..moments)
        .map(|m| {
            let a = std::f64::consts::PI * m as f64 / np1;
            ((moments as f64 - m as f64 + 1.0) * a.cos() + a.sin() * cot) / np1
        })
        .collect()
}

/// Chebyshev coefficients of the step tau_scaled |-> theta(tau_scaled - s) on
/// [-1, 1]: c_0 = 1 - phi/pi, c_m = -2 sin(m phi)/(m pi), phi = arccos(tau).
fn step_coefficients(tau_scaled: f64, moments: usize) -> Vec<f64> {
    let phi = tau_scaled.clamp(-1.0, 1.0).acos();
    let mut c = Vec::with_capacity(moments);
    c.push(1.0 - phi / std::f64::consts::PI);
    for m in 1..moments {
        c.push(-2.0 * (m as f64 * phi).sin() / (m as f64 * std::f64::consts::PI));
    }
    c
}

/// Stochastic estimate of the counting function via Hutchinson probing of
/// tr theta(tau - H) with a Jackson-damped Chebyshev expansion. Deterministic
/// for fixed (seed, moments, probes) across runs and worker-thread counts.
pub fn kpm_count<H: HermitianOp + ?Sized>(
    h: &H,
    tau_grid: &[f64],
    moments: usize,
    probes: usize,
    seed: u64,
) -> Result<CountingCurve> {
    validate_tau_grid(tau_grid)?;
    if moments < 64 {
        return Err(Error::InvalidConfig(format!(
            "kpm needs at least 64 Chebyshev moments, got {moments}"
        )));
    }
    if probes < 8 {
        return Err(Error::InvalidConfig(format!("kpm needs at least 8 probes, got {probes}")));
    }
    let n = h.dim();
    let (lo, hi) = spectral_bounds(h)?;
    let center = 0.5 * (lo + hi);
    let radius = 0.5 * (hi - lo).max(1e-300);

    let mut warnings = Vec::new();
    let scaled: Vec<f64> = tau_grid.iter().map(|&t| (t - center) / radius).collect();
    let clamped = scaled.iter().filter(|s| s.abs() > 1.0).count();
    if clamped > 0 {
        warnings.push(format!(
            "{clamped} threshold(s) outside the spectral bounds [{lo:.6e}, {hi:.6e}] were clamped"
        ));
    }

    let weights = jackson_weights(moments);
    // coefficient table: coeffs[t][m] = g_m c_m(tau_t)
    let coeffs: Vec<Vec<f64>> = scaled
        .iter()
        .map(|&s| {
            step_coefficients(s, moments)
                .into_iter()
                .zip(&weights)
                .map(|(c, &g)| c * g)
                .collect()
        })
        .collect();

    // per-probe moment accumulation, parallel over probes, ordered collect
    let per_probe: Vec<Vec<f64>> = (0..probes)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream(seed, StreamKind::KpmProbe, p as u64);
            let z: Vec<C64> = (0..n)
                .map(|_| C64::new(if rng.gen::<bool>() { 1.0 } else { -1.0 }, 0.0))
                .collect();
            let mut moments_z = Vec::with_capacity(moments);
            moments_z.push(n as f64); // m_0 = z^H z for Rademacher probes
            let mut prev = z.clone();
            let mut cur = vec![C64::new(0.0, 0.0); n];
            // cur = H~ z
            h.apply(&z, &mut cur);
            for i in 0..n {
                cur[i] = (cur[i] - center * z[i]) / radius;
            }
            if moments > 1 {
                moments_z.push(linalg::cdot(&z, &cur).re);
            }
            let mut tmp = vec![C64::new(0.0, 0.0); n];
            for _k in 2..moments {
                // next = 2 H~ cur - prev
                h.apply(&cur, &mut tmp);
                for i in 0..n {
                    let ht = (tmp[i] - center * cur[i]) / radius;
                    tmp[i] = 2.0 * ht - prev[i];
                }
                std::mem::swap(&mut prev, &mut cur);
                std::mem::swap(&mut cur, &mut tmp);
                moments_z.push(linalg::cdot(&z, &cur).re);
            }
            // estimates per threshold for this probe
            coeffs
                .iter()
                .map(|row| {
                    let prods: Vec<f64> =
                        row.iter().zip(&moments_z).map(|(&c, &m)| c * m).collect();
                    pairwise_sum(&prods)
                })
                .collect::<Vec<f64>>()
        })
        .collect();

    let mut counts = Vec::with_capacity(tau_grid.len());
    let mut stderr = Vec::with_capacity(tau_grid.len());
    for t in 0..tau_grid.len() {
        let vals: Vec<f64> = per_probe.iter().map(|pp| pp[t]).collect();
        let mean = pairwise_sum(&vals) / probes as f64;
        let devs: Vec<f64> = vals.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&devs) / (probes as f64 - 1.0);
        counts.push(mean);
        stderr.push((var / probes as f64).sqrt());
    }

    Ok(CountingCurve {
        schema_version: crate::SCHEMA_VERSION,
        tau_grid: tau_grid.to_vec(),
        counts,
        stderr: Some(stderr),
        method: CountMethod::Kpm,
        bounds: (lo, hi),
        eigenvalues: None,
        kpm: Some(KpmMeta { moments, probes, seed }),
        warnings,
    })
}

/// Stochastic estimate of the diagonal-weighted count tr(diag(w) theta(tau - H)).
///
/// Probe vectors are premultiplied by sqrt(w), so the Rademacher expectation
/// telescopes to the weighted trace without eigenvector extraction. Signed
/// weights are split w = w+ - w-; both halves ride the same probe vectors,
/// which makes `weighted_kpm_count` with -w the exact negation of the result
/// for w (IEEE subtraction is sign-symmetric). With w identically 1 the
/// estimator reduces to `kpm_count` value for value.
pub fn weighted_kpm_count<H: HermitianOp + ?Sized>(
    h: &H,
    node_weights: &[f64],
    tau_grid: &[f64],
    moments: usize,
    probes: usize,
    seed: u64,
) -> Result<CountingCurve> {
    validate_tau_grid(tau_grid)?;
    let n = h.dim();
    if node_weights.len() != n {
        return Err(Error::InvalidConfig(format!(
            "weight vector has {} entries but the operator dimension is {n}",
            node_weights.len()
        )));
    }
    if node_weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidConfig("weight vector has a non-finite entry".into()));
    }
    if moments < 64 {
        return Err(Error::InvalidConfig(format!(
            "kpm needs at least 64 Chebyshev moments, got {moments}"
        )));
    }
    if probes < 8 {
        return Err(Error::InvalidConfig(format!("kpm needs at least 8 probes, got {probes}")));
    }
    let (lo, hi) = spectral_bounds(h)?;
    let center = 0.5 * (lo + hi);
    let radius = 0.5 * (hi - lo).max(1e-300);

    let mut warnings = Vec::new();
    let scaled: Vec<f64> = tau_grid.iter().map(|&t| (t - center) / radius).collect();
    let clamped = scaled.iter().filter(|s| s.abs() > 1.0).count();
    if clamped > 0 {
        warnings.push(format!(
            "{clamped} threshold(s) outside the spectral bounds [{lo:.6e}, {hi:.6e}] were clamped"
        ));
    }

    let w_plus: Vec<f64> = node_weights.iter().map(|&w| w.max(0.0)).collect();
    let w_minus: Vec<f64> = node_weights.iter().map(|&w| (-w).max(0.0)).collect();
    let has_plus = w_plus.iter().any(|&w| w != 0.0);
    let has_minus = w_minus.iter().any(|&w| w != 0.0);
    let trace_plus = pairwise_sum(&w_plus);
    let trace_minus = pairwise_sum(&w_minus);

    let weights = jackson_weights(moments);
    let coeffs: Vec<Vec<f64>> = scaled
        .iter()
        .map(|&s| {
            step_coefficients(s, moments)
                .into_iter()
                .zip(&weights)
                .map(|(c, &g)| c * g)
                .collect()
        })
        .collect();

    // Chebyshev moments of one premultiplied probe: m_k = y^H T_k(H~) y with
    // m_0 pinned to the exact weighted trace estimate sum w (z_i^2 = 1).
    let moments_of = |y: &[C64], m0: f64| -> Vec<f64> {
        let mut out = Vec::with_capacity(moments);
        out.push(m0);
        let mut prev = y.to_vec();
        let mut cur = vec![C64::new(0.0, 0.0); n];
        h.apply(y, &mut cur);
        for i in 0..n {
            cur[i] = (cur[i] - center * y[i]) / radius;
        }
        if moments > 1 {
            out.push(linalg::cdot(y, &cur).re);
        }
        let mut tmp = vec![C64::new(0.0, 0.0); n];
        for _k in 2..moments {
            h.apply(&cur, &mut tmp);
            for i in 0..n {
                let ht = (tmp[i] - center * cur[i]) / radius;
                tmp[i] = 2.0 * ht - prev[i];
            }
            std::mem::swap(&mut prev, &mut cur);
            std::mem::swap(&mut cur, &mut tmp);
            out.push(linalg::cdot(y, &cur).re);
        }
        out
    };

    let per_probe: Vec<Vec<f64>> = (0..probes)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream(seed, StreamKind::KpmProbe, p as u64);
            let z: Vec<f64> =
                (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let part = |w: &[f64], trace: f64, active: bool| -> Vec<f64> {
                if !active {
                    return vec![0.0; tau_grid.len()];
                }
                let y: Vec<C64> = z
                    .iter()
                    .zip(w)
                    .map(|(&s, &wi)| C64::new(s * wi.sqrt(), 0.0))
                    .collect();
                let m = moments_of(&y, trace);
                coeffs
                    .iter()
                    .map(|row| {
                        let prods: Vec<f64> =
                            row.iter().zip(&m).map(|(&c, &mk)| c * mk).collect();
                        pairwise_sum(&prods)
                    })
                    .collect()
            };
            let plus = part(&w_plus, trace_plus, has_plus);
            let minus = part(&w_minus, trace_minus, has_minus);
            plus.iter().zip(&minus).map(|(a, b)| a - b).collect::<Vec<f64>>()
        })
        .collect();

    let mut counts = Vec::with_capacity(tau_grid.len());
    let mut stderr = Vec::with_capacity(tau_grid.len());
    for t in 0..tau_grid.len() {
        let vals: Vec<f64> = per_probe.iter().map(|pp| pp[t]).collect();
        let mean = pairwise_sum(&vals) / probes as f64;
        let devs: Vec<f64> = vals.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&devs) / (probes as f64 - 1.0);
        counts.push(mean);
        stderr.push((var / probes as f64).sqrt());
    }

    Ok(CountingCurve {
        schema_version: crate::SCHEMA_VERSION,
        tau_grid: tau_grid.to_vec(),
        counts,
        stderr: Some(stderr),
        method: CountMethod::WeightedKpm,
        bounds: (lo, hi),
        eigenvalues: None,
        kpm: Some(KpmMeta { moments, probes, seed }),
        warnings,
    })
}

// ─────────────────────────────────────────────────────────────────────────
// Inertia counting
// ─────────────────────────────────────────────────────────────────────────

pub fn inertia_count<H: HermitianOp + ?Sized>(h: &H, tau: f64) -> Result<usize> {
    inertia_count_capped(h, tau, DEFAULT_INERTIA_CAP)
}

/// Exact count of eigenvalues <= tau via the negative inertia of H - tau I,
/// computed by a fill-reducing LDL^H factorization. `cap` guards the sparse
/// materialization; raise it only where the fill is known to stay tame (2-D
/// grids).
pub fn inertia_count_capped<H: HermitianOp + ?Sized>(
    h: &H,
    tau: f64,
    cap: usize,
) -> Result<usize> {
    let n = h.dim();
    if n > cap {
        return Err(Error::DimensionCap { method: "inertia_count", n, cap });
    }
    let sp = h.sparse()?;
    let perm = match h.dissection_hint() {
        Some((dims, periodic)) => linalg::nested_dissection_order(&dims, &periodic),
        None => (0..n).collect(),
    };
    // Gershgorin-style spread estimate for the pivot perturbation scale
    let mut spread: f64 = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for k in sp.row_ptr[i]..sp.row_ptr[i + 1] {
            row += sp.values[k].norm();
        }
        spread = spread.max(row);
    }
    spread = (2.0 * spread).max(1e-300);

    let shifted = |shift: f64| -> SparseHermitian {
        let mut m = sp.clone();
        for i in 0..n {
            for k in m.row_ptr[i]..m.row_ptr[i + 1] {
                if m.col_idx[k] == i {
                    m.values[k] -= C64::new(shift, 0.0);
                }
            }
        }
        m
    };

    match linalg::ldlh_inertia(&shifted(tau), &perm) {
        Ok(inertia) => Ok(inertia.negative + inertia.zero),
        Err(_) => {
            // tau is (numerically) an eigenvalue: nudge it upward so the
            // closed convention lambda <= tau keeps the boundary eigenvalue
            let tau2 = tau + 1e-12 * spread;
            let inertia = linalg::ldlh_inertia(&shifted(tau2), &perm)?;
            Ok(inertia.negative + inertia.zero)
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Separable convolution
// ─────────────────────────────────────────────────────────────────────────

/// Exact counting curve of A12 (x) I + I (x) A34 from eigenvalue-backed
/// factor curves: N4(tau) = sum_i N34(tau - lambda_i^(12)).
pub fn convolve_counts(
    curve12: &CountingCurve,
    curve34: &CountingCurve,
    tau_grid: &[f64],
) -> Result<CountingCurve> {
    validate_tau_grid(tau_grid)?;
    let e12 = curve12.eigenvalues.as_ref().ok_or_else(|| {
        Error::InvalidConfig("first factor curve is not eigenvalue-backed".into())
    })?;
    let e34 = curve34.eigenvalues.as_ref().ok_or_else(|| {
        Error::InvalidConfig("second factor curve is not eigenvalue-backed".into())
    })?;
    let mut s34 = e34.clone();
    s34.sort_by(f64::total_cmp);
    let counts: Vec<f64> = tau_grid
        .iter()
        .map(|&tau| {
            e12.iter()
                .map(|&a| s34.partition_point(|&b| a + b <= tau))
                .sum::<usize>() as f64
        })
        .collect();
    let bounds = (
        e12.iter().cloned().fold(f64::INFINITY, f64::min)
            + s34.first().copied().unwrap_or(0.0),
        e12.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            + s34.last().copied().unwrap_or(0.0),
    );
    Ok(CountingCurve {
        schema_version: crate::SCHEMA_VERSION,
        tau_grid: tau_grid.to_vec(),
        counts,
        stderr: None,
        method: CountMethod::Convolved,
        bounds,
        eigenvalues: None,
        kpm: None,
        warnings: Vec::new(),
    })
}

// ─────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────
