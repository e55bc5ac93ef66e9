//! Shared statistical helpers: chi-square quantiles for gating and
//! consistency checks.

use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};

/// Upper quantile of the chi-square distribution with `dof` degrees of
/// freedom: returns x with P(X <= x) = p. The library inverse is a coarse
/// root find (~1e-5); a few Newton steps on the CDF tighten it to near
/// machine precision.
pub fn chi2_quantile(p: f64, dof: usize) -> f64 {
    assert!(dof >= 1, "chi2_quantile needs dof >= 1");
    assert!((0.0..1.0).contains(&p), "quantile probability out of range");
    let dist = ChiSquared::new(dof as f64).expect("valid dof");
    let mut x = dist.inverse_cdf(p);
    for _ in 0..4 {
        let d = dist.pdf(x);
        if d <= 0.0 {
            break;
        }
        x -= (dist.cdf(x) - p) / d;
    }
    x
}
