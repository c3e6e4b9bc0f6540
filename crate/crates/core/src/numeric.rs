//! Log-space arithmetic, normal CDF helpers and adaptive quadrature.

use std::f64::consts::FRAC_1_SQRT_2;

/// Log-ratios are clamped to this range before exponentiation.
pub const LOG_RATIO_MIN: f64 = -745.0;
pub const LOG_RATIO_MAX: f64 = 709.0;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `exp(log_ratio)` after clamping to `[LOG_RATIO_MIN, LOG_RATIO_MAX]`.
pub fn ratio_from_logs(log_num: f64, log_den: f64) -> f64 {
    let d = log_num - log_den;
    if d.is_nan() {
        return f64::NAN;
    }
    d.clamp(LOG_RATIO_MIN, LOG_RATIO_MAX).exp()
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `ln Φ(x)`, accurate in the far left tail where `Φ` underflows.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return normal_cdf(x).ln();
    }
    // asymptotic expansion of the Mills ratio
    let x2 = x * x;
    let mut series = 1.0;
    let mut term = 1.0;
    for k in 1..8 {
        term *= -((2 * k - 1) as f64) / x2;
        series += term;
    }
    -0.5 * x2 - (-x).ln() - LN_SQRT_2PI + series.ln()
}

/// `φ(x) / Φ(x)` computed in log space.
pub fn normal_hazard_ratio(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI - log_normal_cdf(x)).exp()
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    // split into panels first so narrow features are not skipped
    let panels = 64;
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let lo = a + h * i as f64;
        let hi = if i + 1 == panels { b } else { lo + h };
        let flo = f(lo);
        let fhi = f(hi);
        let mid = 0.5 * (lo + hi);
        let fmid = f(mid);
        let whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
        total += simpson_step(&f, lo, hi, flo, fmid, fhi, whole, tol / panels as f64, 48);
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Density of `τ = exp(x)` integrated over `τ ∈ (0, ∞)` by substituting
/// `x = ln τ`; `log_density` receives `τ`.
pub fn integrate_positive_log_scale<F: Fn(f64) -> f64>(
    density: F,
    x_lo: f64,
    x_hi: f64,
    tol: f64,
) -> f64 {
    integrate(|x| {
        let t = x.exp();
        density(t) * t
    }, x_lo, x_hi, tol)
}
