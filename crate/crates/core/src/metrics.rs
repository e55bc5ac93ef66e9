//! Trajectory accuracy and filter consistency metrics: timestamp
//! association, Umeyama alignment, ATE RMSE, and NEES.

use nalgebra::{DVector, Matrix3, Matrix6, Vector3, Vector6};

use crate::error::VioError;
use crate::io::TrajPoint;

/// Association tolerance between estimate and ground-truth stamps.
pub const ASSOC_TOL_S: f64 = 0.005;

/// Rigid (or similarity) alignment `y ~ scale * r * x + t`.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub scale: f64,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Alignment {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.r * x + self.t
    }
}

/// Pairs each estimate index with the nearest ground-truth index whose
/// timestamp is within `ASSOC_TOL_S`. Both inputs must be time-sorted.
pub fn associate(est: &[TrajPoint], truth: &[TrajPoint]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, e) in est.iter().enumerate() {
        while j + 1 < truth.len()
            && (truth[j + 1].t - e.t).abs() <= (truth[j].t - e.t).abs()
        {
            j += 1;
        }
        if !truth.is_empty() && (truth[j].t - e.t).abs() <= ASSOC_TOL_S {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Least-squares alignment of `src` onto `dst` (Umeyama). With
/// `with_scale` the similarity scale is estimated; otherwise it is 1.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Alignment, VioError> {
    let n = src.len();
    if n != dst.len() {
        return Err(VioError::DimensionMismatch { expected: n, got: dst.len() });
    }
    if n < 3 {
        return Err(VioError::TooFewObservations { got: n, need: 3 });
    }
    let nf = n as f64;
    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_d: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (x, y) in src.iter().zip(dst) {
        let xc = x - mu_s;
        let yc = y - mu_d;
        cov += yc * xc.transpose();
        var_s += xc.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| VioError::Numerical("svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| VioError::Numerical("svd failed".into()))?;
    // Reflection guard keeps the estimate in SO(3).
    let mut s_fix = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * vt.determinant()) < 0.0 {
        s_fix.z = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&s_fix) * vt;
    let scale = if with_scale {
        if var_s <= 0.0 {
            return Err(VioError::Numerical("degenerate point set for scale".into()));
        }
        svd.singular_values.dot(&s_fix) / var_s
    } else {
        1.0
    };
    let t = mu_d - scale * r * mu_s;
    Ok(Alignment { scale, r, t })
}

/// Absolute trajectory error after alignment: RMSE of position residuals
/// over associated pairs. `with_scale` switches SE(3) to Sim(3) alignment.
pub fn ate_rmse(
    est: &[TrajPoint],
    truth: &[TrajPoint],
    with_scale: bool,
) -> Result<f64, VioError> {
    let pairs = associate(est, truth);
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est[i].p).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| truth[j].p).collect();
    let a = umeyama(&src, &dst, with_scale)?;
    let sum_sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(x, y)| (y - a.apply(x)).norm_squared())
        .sum();
    Ok((sum_sq / src.len() as f64).sqrt())
}

/// Unaligned final-position error over the associated pairs. Both
/// trajectories share the same global frame, so no alignment is applied.
pub fn endpoint_error(est: &[TrajPoint], truth: &[TrajPoint]) -> Result<f64, VioError> {
    let pairs = associate(est, truth);
    let &(i, j) = pairs
        .last()
        .ok_or(VioError::TooFewObservations { got: 0, need: 1 })?;
    Ok((est[i].p - truth[j].p).norm())
}

/// RMSE over a time slice `[t0, t1]` without alignment, for judging a
/// segment of an already-anchored trajectory.
pub fn segment_rmse(
    est: &[TrajPoint],
    truth: &[TrajPoint],
    t0: f64,
    t1: f64,
) -> Result<f64, VioError> {
    let pairs = associate(est, truth);
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for &(i, j) in &pairs {
        if est[i].t >= t0 && est[i].t <= t1 {
            sum_sq += (est[i].p - truth[j].p).norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        return Err(VioError::TooFewObservations { got: 0, need: 1 });
    }
    Ok((sum_sq / n as f64).sqrt())
}

/// Normalized estimation error squared for one epoch: `e' P^{-1} e`.
pub fn nees6(e: &Vector6<f64>, p: &Matrix6<f64>) -> Result<f64, VioError> {
    let chol = p
        .cholesky()
        .ok_or_else(|| VioError::Numerical("NEES covariance not positive definite".into()))?;
    Ok(e.dot(&chol.solve(e)))
}

/// General-dimension NEES used by toy-filter consistency tests.
pub fn nees_dyn(e: &DVector<f64>, p: &nalgebra::DMatrix<f64>) -> Result<f64, VioError> {
    if p.nrows() != e.len() || p.ncols() != e.len() {
        return Err(VioError::DimensionMismatch { expected: e.len(), got: p.nrows() });
    }
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| VioError::Numerical("NEES covariance not positive definite".into()))?;
    Ok(e.dot(&chol.solve(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_exp;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(rng: &mut StdRng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::from_fn(|_, _| 10.0 * (rng.gen::<f64>() - 0.5)))
            .collect()
    }

    fn traj(points: &[Vector3<f64>]) -> Vec<TrajPoint> {
        points
            .iter()
            .enumerate()
            .map(|(k, p)| TrajPoint {
                t: k as f64 * 0.1,
                p: *p,
                q: nalgebra::UnitQuaternion::identity(),
            })
            .collect()
    }

    #[test]
    fn umeyama_recovers_known_similarity() {
        let mut rng = StdRng::seed_from_u64(70);
        let src = cloud(&mut rng, 40);
        let r_true = rot_exp(&Vector3::new(0.4, -0.2, 1.1));
        let t_true = Vector3::new(3.0, -2.0, 0.5);
        for (scale_true, with_scale) in [(1.0, false), (2.3, true)] {
            let dst: Vec<_> = src.iter().map(|x| scale_true * r_true * x + t_true).collect();
            let a = umeyama(&src, &dst, with_scale).unwrap();
            assert_relative_eq!(a.scale, scale_true, epsilon = 1e-12);
            assert_relative_eq!(a.r, r_true, epsilon = 1e-12);
            assert_relative_eq!(a.t, t_true, epsilon = 1e-10);
        }
    }

    #[test]
    fn ate_is_invariant_to_rigid_offset_of_estimate() {
        let mut rng = StdRng::seed_from_u64(71);
        let pts = cloud(&mut rng, 50);
        let truth = traj(&pts);
        let r = rot_exp(&Vector3::new(-0.3, 0.8, 0.1));
        let moved: Vec<_> = pts.iter().map(|p| r * p + Vector3::new(5.0, 1.0, -2.0)).collect();
        let est = traj(&moved);
        assert!(ate_rmse(&est, &truth, false).unwrap() < 1e-10);
        // A scale distortion is only removed by the Sim(3) variant.
        let scaled: Vec<_> = pts.iter().map(|p| 1.5 * p).collect();
        let est_s = traj(&scaled);
        assert!(ate_rmse(&est_s, &truth, false).unwrap() > 1.0);
        assert!(ate_rmse(&est_s, &truth, true).unwrap() < 1e-10);
    }

    #[test]
    fn ate_matches_noise_level() {
        let mut rng = StdRng::seed_from_u64(72);
        let pts = cloud(&mut rng, 2000);
        let truth = traj(&pts);
        let sigma = 0.2;
        let noisy: Vec<_> = pts
            .iter()
            .map(|p| {
                p + sigma
                    * Vector3::from_fn(|_, _| {
                        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    })
            })
            .collect();
        let est = traj(&noisy);
        let ate = ate_rmse(&est, &truth, false).unwrap();
        let expect = sigma * 3f64.sqrt();
        assert!((ate - expect).abs() < 0.05 * expect, "ate {ate}, expect {expect}");
    }

    #[test]
    fn association_respects_tolerance() {
        let mut rng = StdRng::seed_from_u64(73);
        let pts = cloud(&mut rng, 20);
        let truth = traj(&pts);
        let mut est = truth.clone();
        for e in &mut est {
            e.t += 0.002;
        }
        assert_eq!(associate(&est, &truth).len(), 20);
        for e in &mut est {
            e.t += 0.03;
        }
        // 32 ms total offset: nearest stamp is 32 ms away, beyond the 5 ms gate.
        assert!(associate(&est, &truth).is_empty());
    }

    #[test]
    fn endpoint_and_segment_metrics() {
        let mut rng = StdRng::seed_from_u64(74);
        let pts = cloud(&mut rng, 30);
        let truth = traj(&pts);
        let mut est = truth.clone();
        est.last_mut().unwrap().p += Vector3::new(0.3, 0.0, 0.4);
        assert_relative_eq!(endpoint_error(&est, &truth).unwrap(), 0.5, epsilon = 1e-12);
        for e in est.iter_mut().take(15) {
            e.p += Vector3::new(1.0, 0.0, 0.0);
        }
        let early = segment_rmse(&est, &truth, 0.0, 1.45).unwrap();
        assert_relative_eq!(early, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nees_scales_inversely_with_covariance() {
        let mut rng = StdRng::seed_from_u64(75);
        let e = Vector6::from_fn(|_, _| rng.gen::<f64>() - 0.5);
        let ident = Matrix6::identity();
        assert_relative_eq!(nees6(&e, &ident).unwrap(), e.norm_squared(), epsilon = 1e-12);
        let inflated = 10.0 * ident;
        assert_relative_eq!(
            nees6(&e, &inflated).unwrap(),
            e.norm_squared() / 10.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn nees_of_gaussian_errors_averages_to_dimension() {
        // e ~ N(0, P) with a non-trivial P: mean of e'P^{-1}e is dim.
        let mut rng = StdRng::seed_from_u64(76);
        let a = Matrix6::<f64>::from_fn(|_, _| rng.gen::<f64>() - 0.5);
        let p = a * a.transpose() + Matrix6::identity() * 0.5;
        let l = p.cholesky().unwrap().l();
        let n = 4000;
        let mean = (0..n)
            .map(|_| {
                let z = Vector6::from_fn(|_, _| {
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                });
                nees6(&(l * z), &p).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        // Var of the sample mean is 2*dim/n; allow 5 sigma.
        let tol = 5.0 * (2.0 * 6.0 / n as f64).sqrt();
        assert!((mean - 6.0).abs() < tol, "mean NEES {mean}");
    }
}
