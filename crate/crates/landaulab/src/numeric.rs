//! Small numeric utilities: deterministic summation, finite differences,
//! least-squares lines.

/// Pairwise (cascade) summation. Deterministic for a fixed slice order and
/// accurate to O(log n) rounding growth; used everywhere a parallel reduction
/// would otherwise make results depend on the thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Central finite-difference step for a function evaluated near `scale`:
/// cbrt(machine eps) * (1 + |scale|), the usual optimum for first derivatives
/// of smooth functions under rounding noise.
pub fn fd_step(scale: f64) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + scale.abs())
}

/// Step size for central differences of second derivatives: eps^(1/4)
/// scaled to the magnitude of the argument.
pub fn fd_step2(scale: f64) -> f64 {
    f64::EPSILON.powf(0.25) * (1.0 + scale.abs())
}

/// Central difference d/dt f(t) at t = 0 with step eta.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, eta: f64) -> f64 {
    (f(eta) - f(-eta)) / (2.0 * eta)
}

/// Ordinary least squares fit y = a + b x.
/// Returns (intercept a, slope b, slope standard error).
///
/// The standard error is the usual OLS estimate with n-2 degrees of freedom;
/// it is 0 when n == 2 (exact interpolation) and the call is a programming
/// error when n < 2 or when all x coincide.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len(), "fit_line: mismatched lengths");
    let n = xs.len();
    assert!(n >= 2, "fit_line: need at least 2 points, got {}", n);
    let nf = n as f64;
    let xbar = pairwise_sum(xs) / nf;
    let ybar = pairwise_sum(ys) / nf;
    let sxx: f64 = pairwise_sum(&xs.iter().map(|x| (x - xbar) * (x - xbar)).collect::<Vec<_>>());
    let sxy: f64 = pairwise_sum(
        &xs.iter()
            .zip(ys)
            .map(|(x, y)| (x - xbar) * (y - ybar))
            .collect::<Vec<_>>(),
    );
    assert!(sxx > 0.0, "fit_line: all abscissae coincide");
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    if n == 2 {
        return (intercept, slope, 0.0);
    }
    let ss_res: f64 = pairwise_sum(
        &xs.iter()
            .zip(ys)
            .map(|(x, y)| {
                let r = y - (intercept + slope * x);
                r * r
            })
            .collect::<Vec<_>>(),
    );
    let se = (ss_res / ((nf - 2.0) * sxx)).sqrt();
    (intercept, slope, se)
}

/// Relative difference |a-b| / max(|a|, |b|, floor).
pub fn rel_diff(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
