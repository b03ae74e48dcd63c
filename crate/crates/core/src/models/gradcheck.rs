//! Central-difference verification of analytic gradients.

use rand::seq::index;

use crate::seed;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between the analytic gradient returned by
/// `loss_fn` and central differences `(f(w+εe) − f(w−εe)) / 2ε`, over
/// `probes` coordinates drawn without replacement (all coordinates when
/// `probes` exceeds the parameter count).
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], eps: f64, probes: usize, seed: u64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    assert!(eps > 0.0, "eps must be positive");
    let (_, grad) = loss_fn(params);
    assert_eq!(grad.len(), params.len(), "gradient length must match parameters");
    let n = params.len();
    let coords = index::sample(&mut seed::rng_for(seed, "gradcheck"), n, probes.min(n));
    let mut w = params.to_vec();
    let mut worst = 0.0f64;
    for c in coords {
        let orig = w[c];
        w[c] = orig + eps;
        let (up, _) = loss_fn(&w);
        w[c] = orig - eps;
        let (down, _) = loss_fn(&w);
        w[c] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(grad[c], numeric));
    }
    worst
}
