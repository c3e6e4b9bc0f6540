#![allow(dead_code)]

use tppsd_core::model::MixtureParams;
use tppsd_core::RngStream;

/// A random log-normal mixture with well-separated, moderate scales.
pub fn random_mixture(rng: &mut RngStream, max_components: usize) -> MixtureParams {
    let m = 1 + (rng.uniform01() * max_components as f64) as usize;
    let raw: Vec<f64> = (0..m).map(|_| 0.1 + rng.uniform01()).collect();
    let total: f64 = raw.iter().sum();
    MixtureParams::new(
        raw.iter().map(|w| w / total).collect(),
        (0..m).map(|_| 2.0 * rng.uniform01() - 1.0).collect(),
        (0..m).map(|_| 0.3 + 1.2 * rng.uniform01()).collect(),
    )
    .unwrap()
}

pub fn density(g: &MixtureParams, tau: f64) -> f64 {
    g.weights
        .iter()
        .zip(&g.means)
        .zip(&g.scales)
        .map(|((w, mu), s)| {
            let z = (tau.ln() - mu) / s;
            w * (-0.5 * z * z).exp() / (tau * s * (2.0 * std::f64::consts::PI).sqrt())
        })
        .sum()
}

/// Cumulative trapezoid of `f(τ)` on a log-spaced grid covering every
/// component to ±14σ. Returns `(grid, cumulative integral)`.
pub fn cumulative<F: Fn(f64) -> f64>(gs: &[&MixtureParams], f: F, points: usize) -> (Vec<f64>, Vec<f64>) {
    let lo = gs
        .iter()
        .flat_map(|g| g.means.iter().zip(&g.scales).map(|(m, s)| m - 14.0 * s))
        .fold(f64::INFINITY, f64::min);
    let hi = gs
        .iter()
        .flat_map(|g| g.means.iter().zip(&g.scales).map(|(m, s)| m + 14.0 * s))
        .fold(f64::NEG_INFINITY, f64::max);
    let h = (hi - lo) / (points - 1) as f64;
    let us: Vec<f64> = (0..points).map(|i| lo + i as f64 * h).collect();
    let vals: Vec<f64> = us.iter().map(|u| f(u.exp()) * u.exp()).collect();
    let mut acc = vec![0.0; points];
    for i in 1..points {
        acc[i] = acc[i - 1] + 0.5 * h * (vals[i] + vals[i - 1]);
    }
    (us.iter().map(|u| u.exp()).collect(), acc)
}

/// Linear interpolation of a tabulated increasing function.
pub fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let i = xs.partition_point(|&v| v < x);
    let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
    ys[i - 1] + t * (ys[i] - ys[i - 1])
}

/// `sup |F_n − F|` of a sample against a continuous CDF.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// CDF of `norm(max(0, g_T − g_D))` by quadrature, and its normaliser.
pub fn residual_cdf(target: &MixtureParams, draft: &MixtureParams) -> (impl Fn(f64) -> f64, f64) {
    let (xs, acc) = cumulative(
        &[target, draft],
        |t| (density(target, t) - density(draft, t)).max(0.0),
        40_000,
    );
    let z = acc[acc.len() - 1];
    let ys: Vec<f64> = acc.iter().map(|a| a / z).collect();
    (move |x| interpolate(&xs, &ys, x), z)
}
