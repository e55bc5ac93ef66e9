//! Classical landmark triangulation and the triangulated (feature-
//! eliminating) measurement block. This is the ablation baseline the
//! pose-only model replaces, and doubles as a test oracle: DLT linear
//! initialization, Gauss-Newton refinement of the reprojection cost, and
//! the left-nullspace-projected clone-window update.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use crate::error::VioError;
use crate::geometry::skew;
use crate::po::{CameraPose, FeatureTrack, ResidualBlock};
use crate::state::ErrorConvention;

/// Linear (DLT) triangulation: each view contributes the epipolar
/// constraint [p_C x] R_GC (p_f - t) = 0.
pub fn triangulate_linear(
    track: &FeatureTrack,
    poses: &[CameraPose],
) -> Result<Vector3<f64>, VioError> {
    let n = track.observations.len();
    if n < 2 {
        return Err(VioError::TooFewObservations { got: n, need: 2 });
    }
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (m, (_, p_c)) in track.observations.iter().enumerate() {
        let a = skew(p_c) * poses[m].r_gc;
        let b = a * poses[m].t_gc;
        ata += a.transpose() * a;
        atb += a.transpose() * b;
    }
    // Rank-deficient normal equations mean no baseline (pure rotation).
    let svd = nalgebra::SymmetricEigen::new(ata);
    let min_eig = svd.eigenvalues.min();
    let max_eig = svd.eigenvalues.max();
    if min_eig <= 1e-12 * max_eig.max(1.0) {
        return Err(VioError::DegenerateBaseline { norm: min_eig });
    }
    Ok(ata.lu().solve(&atb).ok_or(VioError::SingularInnovation)?)
}

fn reprojection_cost(track: &FeatureTrack, poses: &[CameraPose], p_f: &Vector3<f64>) -> f64 {
    let mut c = 0.0;
    for (m, (_, p_c)) in track.observations.iter().enumerate() {
        let x = poses[m].r_gc * (p_f - poses[m].t_gc);
        let r = Vector2::new(p_c.x - x.x / x.z, p_c.y - x.y / x.z);
        c += r.norm_squared();
    }
    c
}

/// DLT followed by damped Gauss-Newton on the reprojection cost. The step
/// is halved until the cost decreases, so the cost sequence is monotone.
pub fn triangulate_oracle(
    track: &FeatureTrack,
    poses: &[CameraPose],
) -> Result<Vector3<f64>, VioError> {
    let mut p_f = triangulate_linear(track, poses)?;
    let mut cost = reprojection_cost(track, poses, &p_f);
    for _ in 0..10 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (m, (_, p_c)) in track.observations.iter().enumerate() {
            let x = poses[m].r_gc * (p_f - poses[m].t_gc);
            if x.z.abs() < 1e-9 {
                return Err(VioError::NegativeDepth { view: m });
            }
            let iz = 1.0 / x.z;
            let jp = nalgebra::Matrix2x3::new(iz, 0.0, -x.x * iz * iz, 0.0, iz, -x.y * iz * iz);
            let j = jp * poses[m].r_gc;
            let r = Vector2::new(p_c.x - x.x * iz, p_c.y - x.y * iz);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let step = match jtj.cholesky() {
            Some(ch) => ch.solve(&jtr),
            None => break,
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let cand = p_f + alpha * step;
            let c = reprojection_cost(track, poses, &cand);
            if c <= cost {
                p_f = cand;
                cost = c;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted || step.norm() < 1e-12 {
            break;
        }
    }
    Ok(p_f)
}

/// Residual block of the triangulated model: reprojection residuals of the
/// DLT+GN landmark against every view, with the landmark's own Jacobian
/// projected out through the left nullspace (the step the pose-only model
/// makes unnecessary).
pub fn triangulated_block(
    track: &FeatureTrack,
    poses: &[CameraPose],
    window: &[usize],
    state_dim: usize,
    clone_phi_start: impl Fn(usize) -> usize,
    clone_pos_start: impl Fn(usize) -> usize,
    body_positions: &[Vector3<f64>],
    sigma_n: f64,
    convention: ErrorConvention,
) -> Result<ResidualBlock, VioError> {
    let p_f = triangulate_oracle(track, poses)?;
    let m = track.observations.len();
    let mut r = DVector::zeros(2 * m);
    let mut h_x = DMatrix::zeros(2 * m, state_dim);
    let mut h_f = DMatrix::zeros(2 * m, 3);
    for (row, (_, p_c)) in track.observations.iter().enumerate() {
        let x = poses[row].r_gc * (p_f - poses[row].t_gc);
        if x.z <= 0.0 {
            return Err(VioError::NegativeDepth { view: row });
        }
        let iz = 1.0 / x.z;
        let jp = nalgebra::Matrix2x3::new(iz, 0.0, -x.x * iz * iz, 0.0, iz, -x.y * iz * iz);
        r[2 * row] = p_c.x - x.x * iz;
        r[2 * row + 1] = p_c.y - x.y * iz;
        // dX_c through the injection: R_GC([lever x]dphi + d dp + dp_f),
        // lever = p_f under the transformed convention, p_f - p_body
        // under the classical one.
        let lever = match convention {
            ErrorConvention::Dst => p_f,
            ErrorConvention::Classical => p_f - body_positions[row],
        };
        let jr = jp * poses[row].r_gc;
        let jphi = jr * skew(&lever);
        let idx = window[row];
        for c in 0..3 {
            for rr in 0..2 {
                h_x[(2 * row + rr, clone_phi_start(idx) + c)] += jphi[(rr, c)];
                h_x[(2 * row + rr, clone_pos_start(idx) + c)] += jr[(rr, c)];
                h_f[(2 * row + rr, c)] = jr[(rr, c)];
            }
        }
    }
    // Left-nullspace projection: rows of U_n^T annihilate H_f.
    let svd = nalgebra::SVD::new(h_f.clone(), true, false);
    let u = svd.u.as_ref().expect("u requested");
    // 2m x 2m orthogonal completion: nalgebra returns thin U (2m x 3), so
    // build the complement by Gram-Schmidt against its columns.
    let nullity = 2 * m - 3;
    let basis: Vec<DVector<f64>> = (0..3).map(|c| u.column(c).clone_owned()).collect();
    let mut complement: Vec<DVector<f64>> = Vec::with_capacity(nullity);
    let mut seed = 0usize;
    while complement.len() < nullity && seed < 4 * m + 8 {
        let mut v = DVector::zeros(2 * m);
        v[seed % (2 * m)] = 1.0;
        if seed >= 2 * m {
            // Fall back to a varied vector if unit vectors degenerate.
            for i in 0..2 * m {
                v[i] = ((seed * 31 + i * 17) % 13) as f64 - 6.0;
            }
        }
        for b in basis.iter().chain(complement.iter()) {
            let d = b.dot(&v);
            v -= b * d;
        }
        if v.norm() > 1e-8 {
            let v = v.normalize();
            complement.push(v);
        }
        seed += 1;
    }
    if complement.len() < nullity {
        return Err(VioError::Numerical("left-nullspace completion failed".into()));
    }
    let mut proj = DMatrix::zeros(nullity, 2 * m);
    for (i, v) in complement.iter().enumerate() {
        proj.row_mut(i).copy_from(&v.transpose());
    }
    let r_proj = &proj * r;
    let h_proj = &proj * h_x;
    let r_meas = DMatrix::identity(nullity, nullity) * (sigma_n * sigma_n);
    Ok(ResidualBlock { r: r_proj, h: h_proj, r_meas })
}
