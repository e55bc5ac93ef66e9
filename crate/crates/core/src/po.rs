//! Pose-only multi-view measurement model: base-view selection, the
//! depth-free feature point, reprojection residuals, analytic Jacobians
//! over the clone window, chi-square gating, and the EKF update.
//!
//! The model eliminates feature depth algebraically. With base views
//! (j, k) and normalized observations p_C, the feature seen from view i is
//! reconstructed up to one common positive scale as
//!
//! ```text
//! P_i = ||[t_kj x] p_Ck|| . R_{Cj->Ci} p_Cj + ||[p_Ck x] R_{Cj->Ck} p_Cj|| . t_ij
//! ```
//!
//! where t_nm is the position of camera m in camera n's frame. On perfect
//! data P_i equals the true camera-i point scaled by ||[p_Ck x] R p_Cj||,
//! so the perspective divide cancels the scale and the residual vanishes.
//! Because no feature coordinates enter the state, the update needs no
//! left-nullspace projection: H has columns only over the error layout.
//!
//! Jacobians are derived by differentiating through the error injection
//! (`inject_correction`): under the transformed convention a camera center
//! moves like the body position, d t_m = -[t_m x] dphi_m - d dp_m, which is
//! what makes relative translations depend only on error differences.

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, Vector2, Vector3};

use crate::error::VioError;
use crate::geometry::skew;
use crate::state::{inject_correction, CloneState, ErrorConvention, ErrorCovariance, NavState};
use crate::stats::chi2_quantile;

/// Minimum base-view baseline, m.
pub const EPS_BASELINE: f64 = 1e-4;
/// Parallax angle below which a track is flagged degenerate, rad.
pub const DEGENERATE_PARALLAX: f64 = 1e-3;
/// Gate probability for the per-feature chi-square test.
pub const GATE_PROB: f64 = 0.95;
/// Variance floor (units of bearing variance) on the right base view's
/// rows, whose first-order noise vanishes along the epipolar direction.
/// A full-pixel floor: sharper values amplify linearization error through
/// the implied scale constraint and destabilize stressed runs.
pub const K_ROW_FLOOR: f64 = 1.0;

/// Camera-body mounting: rotation body->camera and camera origin in body.
#[derive(Debug, Clone, PartialEq)]
pub struct Extrinsics {
    pub r_bc: Matrix3<f64>,
    pub p_bc: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Extrinsics { r_bc: Matrix3::identity(), p_bc: Vector3::zeros() }
    }
}

/// One tracked feature: ordered (clone_id, normalized homogeneous [X, Y, 1])
/// observations, at most one per clone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub feature_id: u64,
    pub observations: Vec<(u64, Vector3<f64>)>,
}

/// Selected base views: indices into the track's observation list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasePair {
    pub j: usize,
    pub k: usize,
    /// Rotation-compensated parallax of the selected pair, rad.
    pub theta: f64,
    pub degenerate: bool,
}

/// Camera pose: rotation global->camera and camera origin in global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub r_gc: Matrix3<f64>,
    pub t_gc: Vector3<f64>,
}

/// Stacked residual, Jacobian over the full error layout, and noise.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub r: DVector<f64>,
    pub h: DMatrix<f64>,
    pub r_meas: DMatrix<f64>,
}

/// Camera pose of a clone: R_GC = R_bC R_Gb, t_GC = p_Gb + R_bG p_bC.
pub fn camera_pose(clone: &CloneState, ext: &Extrinsics) -> CameraPose {
    let r_bg = clone.rot();
    CameraPose { r_gc: ext.r_bc * r_bg.transpose(), t_gc: clone.p + r_bg * ext.p_bc }
}

/// Camera poses for every observation of a track, plus the window index of
/// each observed clone.
pub fn track_poses(
    track: &FeatureTrack,
    state: &NavState,
    ext: &Extrinsics,
) -> Result<(Vec<CameraPose>, Vec<usize>), VioError> {
    let mut poses = Vec::with_capacity(track.observations.len());
    let mut idx = Vec::with_capacity(track.observations.len());
    for (clone_id, _) in &track.observations {
        let (i, clone) = state
            .clone_by_id(*clone_id)
            .ok_or_else(|| VioError::Numerical(format!("track references unknown clone {clone_id}")))?;
        poses.push(camera_pose(clone, ext));
        idx.push(i);
    }
    Ok((poses, idx))
}

/// Rotation-compensated parallax angle between observations a and b.
fn parallax(track: &FeatureTrack, poses: &[CameraPose], a: usize, b: usize) -> f64 {
    let p_a = track.observations[a].1;
    let p_b = track.observations[b].1;
    let r_ab = poses[b].r_gc * poses[a].r_gc.transpose();
    let rotated = r_ab * p_a;
    let c = (rotated.dot(&p_b) / (rotated.norm() * p_b.norm())).clamp(-1.0, 1.0);
    c.acos()
}

/// Picks the pair maximizing the rotation-compensated parallax angle;
/// deterministic lexicographic tie-break. Flags the track degenerate when
/// even the best pair has (numerically) no parallax.
pub fn select_base_views(
    track: &FeatureTrack,
    poses: &[CameraPose],
) -> Result<BasePair, VioError> {
    let n = track.observations.len();
    if n < 2 {
        return Err(VioError::TooFewObservations { got: n, need: 2 });
    }
    let mut best = (0usize, 1usize);
    let mut best_theta = -1.0;
    for j in 0..n {
        for k in (j + 1)..n {
            let theta = parallax(track, poses, j, k);
            // Strict > keeps the lexicographically smallest maximizer.
            if theta > best_theta + 1e-15 {
                best_theta = theta;
                best = (j, k);
            }
        }
    }
    Ok(BasePair {
        j: best.0,
        k: best.1,
        theta: best_theta,
        degenerate: best_theta < DEGENERATE_PARALLAX,
    })
}

/// Depth-free feature point in camera i's frame, up to common positive
/// scale. Fails on a vanishing base baseline or nonpositive depth.
pub fn po_point(
    track: &FeatureTrack,
    base: &BasePair,
    i: usize,
    poses: &[CameraPose],
) -> Result<Vector3<f64>, VioError> {
    let (j, k) = (base.j, base.k);
    let p_cj = track.observations[j].1;
    let p_ck = track.observations[k].1;
    let baseline = poses[j].t_gc - poses[k].t_gc;
    if baseline.norm() < EPS_BASELINE {
        return Err(VioError::DegenerateBaseline { norm: baseline.norm() });
    }
    let c_kj = poses[k].r_gc * baseline;
    let w = c_kj.cross(&p_ck);
    let rho_k = poses[k].r_gc * (poses[j].r_gc.transpose() * p_cj);
    let u = p_ck.cross(&rho_k);
    let rho_i = poses[i].r_gc * (poses[j].r_gc.transpose() * p_cj);
    let c_ij = poses[i].r_gc * (poses[j].t_gc - poses[i].t_gc);
    let p = w.norm() * rho_i + u.norm() * c_ij;
    if p.z <= 0.0 {
        return Err(VioError::NegativeDepth { view: i });
    }
    Ok(p)
}

/// Residual view order: every observation except the left base view j,
/// ascending by clone_id.
pub fn residual_views(track: &FeatureTrack, base: &BasePair) -> Vec<usize> {
    let mut views: Vec<usize> =
        (0..track.observations.len()).filter(|&i| i != base.j).collect();
    views.sort_by_key(|&i| track.observations[i].0);
    views
}

fn project(p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(p.x / p.z, p.y / p.z)
}

fn project_jacobian(p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    nalgebra::Matrix2x3::new(iz, 0.0, -p.x * iz * iz, 0.0, iz, -p.y * iz * iz)
}

/// Stacked reprojection residual over all non-base views.
pub fn po_residual(
    track: &FeatureTrack,
    base: &BasePair,
    state: &NavState,
    ext: &Extrinsics,
) -> Result<DVector<f64>, VioError> {
    let (poses, _) = track_poses(track, state, ext)?;
    po_residual_with(track, base, &poses)
}

fn po_residual_with(
    track: &FeatureTrack,
    base: &BasePair,
    poses: &[CameraPose],
) -> Result<DVector<f64>, VioError> {
    let views = residual_views(track, base);
    let mut r = DVector::zeros(2 * views.len());
    for (row, &i) in views.iter().enumerate() {
        let p = po_point(track, base, i, poses)?;
        let pred = project(&p);
        let obs = track.observations[i].1;
        r[2 * row] = obs.x - pred.x;
        r[2 * row + 1] = obs.y - pred.y;
    }
    Ok(r)
}

/// Sparse 3xN Jacobian of a 3-vector quantity: per-clone (d/dphi, d/ddp)
/// 3x3 blocks keyed by window index.
#[derive(Clone, Default)]
struct Jac3 {
    entries: Vec<(usize, Matrix3<f64>, Matrix3<f64>)>,
}

impl Jac3 {
    fn add_phi(&mut self, idx: usize, m: Matrix3<f64>) {
        match self.entries.iter_mut().find(|e| e.0 == idx) {
            Some(e) => e.1 += m,
            None => self.entries.push((idx, m, Matrix3::zeros())),
        }
    }
    fn add_pos(&mut self, idx: usize, m: Matrix3<f64>) {
        match self.entries.iter_mut().find(|e| e.0 == idx) {
            Some(e) => e.2 += m,
            None => self.entries.push((idx, Matrix3::zeros(), m)),
        }
    }
    /// a * self, blockwise.
    fn premul(&self, a: &Matrix3<f64>) -> Jac3 {
        Jac3 {
            entries: self.entries.iter().map(|(i, f, p)| (*i, a * f, a * p)).collect(),
        }
    }
    /// self scaled + outer(col, row . other): the product-rule combination
    /// d(s v) = v (r^T d s-arg) + s d v used for the norm-weighted terms.
    fn accumulate(&mut self, other: &Jac3, scale: f64) {
        for (i, f, p) in &other.entries {
            self.add_phi(*i, scale * f);
            self.add_pos(*i, scale * p);
        }
    }
    fn accumulate_outer(&mut self, col: &Vector3<f64>, row: &RowVector3<f64>, arg: &Jac3) {
        for (i, f, p) in &arg.entries {
            self.add_phi(*i, col * (row * f));
            self.add_pos(*i, col * (row * p));
        }
    }
}

/// d t_m / d phi_m for the camera center of clone m under each convention.
fn camera_center_phi_block(
    clone: &CloneState,
    ext: &Extrinsics,
    pose: &CameraPose,
    convention: ErrorConvention,
) -> Matrix3<f64> {
    match convention {
        ErrorConvention::Dst => -skew(&pose.t_gc),
        ErrorConvention::Classical => -skew(&(clone.rot() * ext.p_bc)),
    }
}

/// Jacobian of c_nm = R_GCn (t_m - t_n), the position of camera m in
/// camera n's frame, with per-clone center blocks A_phi (d t / d phi) and
/// the fixed d t / d dp = -I.
fn rel_translation_jac(
    n: usize,
    m: usize,
    poses: &[CameraPose],
    window: &[usize],
    a_phi: &[Matrix3<f64>],
) -> Jac3 {
    let mut j = Jac3::default();
    if n == m {
        return j;
    }
    let rn = poses[n].r_gc;
    let d = poses[m].t_gc - poses[n].t_gc;
    j.add_phi(window[n], rn * (skew(&d) - a_phi[n]));
    j.add_pos(window[n], rn);
    j.add_phi(window[m], rn * a_phi[m]);
    j.add_pos(window[m], -rn);
    j
}

/// Jacobian of rho = R_GCn R_GCj^T p_Cj (ray j rotated into camera n).
fn rotated_ray_jac(n: usize, jv: usize, poses: &[CameraPose], window: &[usize], y_j: &Vector3<f64>) -> Jac3 {
    let mut j = Jac3::default();
    if n == jv {
        return j;
    }
    let block = poses[n].r_gc * skew(y_j);
    j.add_phi(window[n], block);
    j.add_phi(window[jv], -block);
    j
}

/// Measurement Jacobian over the full error layout. Columns exist only for
/// clones in {view, base j, base k}; the inertial block is zero.
pub fn po_jacobian(
    track: &FeatureTrack,
    base: &BasePair,
    state: &NavState,
    ext: &Extrinsics,
    convention: ErrorConvention,
) -> Result<DMatrix<f64>, VioError> {
    let (poses, window) = track_poses(track, state, ext)?;
    po_jacobian_with(track, base, state, ext, &poses, &window, convention)
}

fn po_jacobian_with(
    track: &FeatureTrack,
    base: &BasePair,
    state: &NavState,
    ext: &Extrinsics,
    poses: &[CameraPose],
    window: &[usize],
    convention: ErrorConvention,
) -> Result<DMatrix<f64>, VioError> {
    let layout = state.layout();
    let views = residual_views(track, base);
    let (j, k) = (base.j, base.k);
    let p_cj = track.observations[j].1;
    let p_ck = track.observations[k].1;

    let a_phi: Vec<Matrix3<f64>> = track
        .observations
        .iter()
        .enumerate()
        .map(|(m, (clone_id, _))| {
            let (_, clone) = state.clone_by_id(*clone_id).expect("validated by track_poses");
            camera_center_phi_block(clone, ext, &poses[m], convention)
        })
        .collect();

    // Base-pair quantities shared by every view.
    let baseline = poses[j].t_gc - poses[k].t_gc;
    if baseline.norm() < EPS_BASELINE {
        return Err(VioError::DegenerateBaseline { norm: baseline.norm() });
    }
    let y_j = poses[j].r_gc.transpose() * p_cj;
    let c_kj = poses[k].r_gc * baseline;
    let w = c_kj.cross(&p_ck);
    let rho_k = poses[k].r_gc * y_j;
    let u = p_ck.cross(&rho_k);
    let a = w.norm();
    let b = u.norm();
    let w_hat = (w / a).transpose();
    let u_hat = (u / b).transpose();

    // dw = -[p_Ck x] dc_kj ; du = [p_Ck x] drho_k.
    let dc_kj = rel_translation_jac(k, j, poses, window, &a_phi);
    let dw = dc_kj.premul(&(-skew(&p_ck)));
    let drho_k = rotated_ray_jac(k, j, poses, window, &y_j);
    let du = drho_k.premul(&skew(&p_ck));

    let mut h = DMatrix::zeros(2 * views.len(), layout.dim());
    for (row, &i) in views.iter().enumerate() {
        let rho_i = poses[i].r_gc * y_j;
        let c_ij = poses[i].r_gc * (poses[j].t_gc - poses[i].t_gc);
        let p = a * rho_i + b * c_ij;
        if p.z <= 0.0 {
            return Err(VioError::NegativeDepth { view: i });
        }
        // dP = rho_i (w_hat dw) + a drho_i + c_ij (u_hat du) + b dc_ij.
        let mut dp = Jac3::default();
        dp.accumulate_outer(&rho_i, &w_hat, &dw);
        dp.accumulate(&rotated_ray_jac(i, j, poses, window, &y_j), a);
        dp.accumulate_outer(&c_ij, &u_hat, &du);
        dp.accumulate(&rel_translation_jac(i, j, poses, window, &a_phi), b);

        let jp = project_jacobian(&p);
        for (idx, f, pos) in &dp.entries {
            let hf = jp * f;
            let hp = jp * pos;
            for r in 0..2 {
                for c in 0..3 {
                    h[(2 * row + r, layout.clone_phi(*idx).start + c)] += hf[(r, c)];
                    h[(2 * row + r, layout.clone_pos(*idx).start + c)] += hp[(r, c)];
                }
            }
        }
    }
    Ok(h)
}

/// Per-row sensitivity of residual row i to the bearing noise of base
/// views j and k. Row i's residual is z_i - pi(P_i) with P_i built from
/// the measured base bearings, so their noise re-enters every row; the
/// pair (A_j, B_k) is (dr_i/du_j, dr_i/du_k) where u are image-plane
/// bearing coordinates (the identity from z_k itself is folded into B
/// when i is the right base view).
fn po_row_base_sensitivity(
    track: &FeatureTrack,
    base: &BasePair,
    poses: &[CameraPose],
    i: usize,
) -> Result<(nalgebra::Matrix2<f64>, nalgebra::Matrix2<f64>), VioError> {
    let (j, k) = (base.j, base.k);
    let p_cj = track.observations[j].1;
    let p_ck = track.observations[k].1;
    let baseline = poses[j].t_gc - poses[k].t_gc;
    if baseline.norm() < EPS_BASELINE {
        return Err(VioError::DegenerateBaseline { norm: baseline.norm() });
    }
    let y_j = poses[j].r_gc.transpose() * p_cj;
    let c_kj = poses[k].r_gc * baseline;
    let w = c_kj.cross(&p_ck);
    let rho_k = poses[k].r_gc * y_j;
    let u = p_ck.cross(&rho_k);
    let (a, b) = (w.norm(), u.norm());
    let w_hat = (w / a).transpose();
    let u_hat = (u / b).transpose();
    let r_ij = poses[i].r_gc * poses[j].r_gc.transpose();
    let r_kj = poses[k].r_gc * poses[j].r_gc.transpose();

    let rho_i = poses[i].r_gc * y_j;
    let c_ij = poses[i].r_gc * (poses[j].t_gc - poses[i].t_gc);
    let p = a * rho_i + b * c_ij;
    if p.z <= 0.0 {
        return Err(VioError::NegativeDepth { view: i });
    }
    let jp = project_jacobian(&p);
    // Image-plane perturbations lift to homogeneous bearings via [e1 e2].
    let e = nalgebra::Matrix3x2::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0);

    // dP/dp_Cj: through rho (scaled a) and through b = ||[p_Ck x] R_kj p_Cj||.
    let dp_dj = a * r_ij + c_ij * (u_hat * skew(&p_ck) * r_kj);
    // dP/dp_Ck: through a = ||[c_kj x] p_Ck|| and b = ||[p_Ck x] rho_k||.
    let dp_dk = rho_i * (w_hat * skew(&c_kj)) - c_ij * (u_hat * skew(&rho_k));

    let a_j = -jp * dp_dj * e;
    let mut b_k = -jp * dp_dk * e;
    if i == k {
        b_k += nalgebra::Matrix2::identity();
    }
    Ok((a_j, b_k))
}

/// First-order noise covariance of the stacked residual, in units of the
/// bearing variance: own-view noise (identity blocks; the right base
/// view's own noise is folded into its B) plus the base-view noise, which
/// is common to all rows, so R is a rank-4 correction to the identity and
/// decidedly not diagonal. Booking it densely is what keeps the update
/// consistent without deweighting geometry-rich rows.
fn po_noise_with(
    track: &FeatureTrack,
    base: &BasePair,
    poses: &[CameraPose],
    views: &[usize],
) -> Result<DMatrix<f64>, VioError> {
    let dim = 2 * views.len();
    let mut a_stack = DMatrix::zeros(dim, 2);
    let mut b_stack = DMatrix::zeros(dim, 2);
    for (row, &i) in views.iter().enumerate() {
        let (a_j, b_k) = po_row_base_sensitivity(track, base, poses, i)?;
        a_stack.view_mut((2 * row, 0), (2, 2)).copy_from(&a_j);
        b_stack.view_mut((2 * row, 0), (2, 2)).copy_from(&b_k);
    }
    // The right base view's own noise is already inside its B (the
    // reconstruction tracks that bearing along the epipolar line, so one
    // direction of its row is first-order noise-free). A floor still goes
    // on that row, because a model claiming an exactly noise-free
    // direction would let second-order terms snap the state; keeping the
    // floor well below one pixel preserves the epipolar scale constraint
    // that distinguishes this model from landmark marginalization.
    let mut r = DMatrix::identity(dim, dim);
    for (row, &i) in views.iter().enumerate() {
        if i == base.k {
            r[(2 * row, 2 * row)] = K_ROW_FLOOR;
            r[(2 * row + 1, 2 * row + 1)] = K_ROW_FLOOR;
        }
    }
    r += &a_stack * a_stack.transpose() + &b_stack * b_stack.transpose();
    Ok(r)
}

/// Builds residual, Jacobian, and noise for one track in a single pass.
/// `sigma_n` is the observation noise in normalized-plane units; the noise
/// model books the first-order effect of that noise entering through the
/// measured base-view bearings, including its cross-row correlation.
pub fn po_block(
    track: &FeatureTrack,
    base: &BasePair,
    state: &NavState,
    ext: &Extrinsics,
    sigma_n: f64,
    convention: ErrorConvention,
) -> Result<ResidualBlock, VioError> {
    let (poses, window) = track_poses(track, state, ext)?;
    let r = po_residual_with(track, base, &poses)?;
    let h = po_jacobian_with(track, base, state, ext, &poses, &window, convention)?;
    let views = residual_views(track, base);
    let r_meas = po_noise_with(track, base, &poses, &views)? * (sigma_n * sigma_n);
    Ok(ResidualBlock { r, h, r_meas })
}

/// Mahalanobis gate at `GATE_PROB`: accept iff r^T S^-1 r below the
/// chi-square quantile with dim(r) degrees of freedom.
pub fn chi2_gate(
    r: &DVector<f64>,
    h: &DMatrix<f64>,
    p: &ErrorCovariance,
    r_meas: &DMatrix<f64>,
) -> Result<bool, VioError> {
    let s = h * &p.m * h.transpose() + r_meas;
    let chol = s.clone().cholesky().ok_or(VioError::SingularInnovation)?;
    let alpha = r.dot(&chol.solve(r));
    Ok(alpha < chi2_quantile(GATE_PROB, r.len()))
}

/// Standard EKF update with Joseph-form covariance; the correction is
/// injected through the convention's retraction.
pub fn ekf_update(
    state: &NavState,
    p: &ErrorCovariance,
    block: &ResidualBlock,
    convention: ErrorConvention,
) -> Result<(NavState, ErrorCovariance), VioError> {
    let n = p.dim();
    if block.h.ncols() != n {
        return Err(VioError::DimensionMismatch { expected: n, got: block.h.ncols() });
    }
    let s = &block.h * &p.m * block.h.transpose() + &block.r_meas;
    let chol = s.cholesky().ok_or(VioError::SingularInnovation)?;
    // K = P H^T S^-1, via S K^T = H P.
    let k = chol.solve(&(&block.h * &p.m)).transpose();
    let dx = &k * &block.r;
    let new_state = inject_correction(state, &dx, convention)?;
    let ikh = DMatrix::identity(n, n) - &k * &block.h;
    let mut new_p =
        ErrorCovariance::from_matrix(&ikh * &p.m * ikh.transpose() + &k * &block.r_meas * k.transpose());
    new_p.symmetrize();
    Ok((new_state, new_p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_from_small_angle, rot_exp};
    use approx::assert_relative_eq;
    use nalgebra::{DVector, Matrix4, UnitQuaternion};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut StdRng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            * 2.0
            * s
    }

    fn rand_unit_quat(rng: &mut StdRng, s: f64) -> UnitQuaternion<f64> {
        quat_from_small_angle(&rand_vec(rng, s))
    }

    /// A generic scene: clones spread along x with small attitude offsets,
    /// one landmark in front of every camera, exact observations.
    fn make_scene(
        rng: &mut StdRng,
        n_clones: usize,
        ext: &Extrinsics,
    ) -> (NavState, FeatureTrack, Vector3<f64>) {
        let mut state = NavState::new(crate::state::ImuState::identity());
        for m in 0..n_clones {
            state.clones.push(CloneState {
                clone_id: m as u64,
                timestamp: m as f64 * 0.1,
                q: rand_unit_quat(rng, 0.15),
                p: Vector3::new(m as f64 * 0.6, 0.0, 0.0) + rand_vec(rng, 0.05),
            });
        }
        let p_f = Vector3::new(
            0.3 * n_clones as f64 + rng.gen::<f64>(),
            rng.gen::<f64>() - 0.5,
            2.5 + rng.gen::<f64>(),
        );
        let mut obs = Vec::new();
        for clone in &state.clones {
            let pose = camera_pose(clone, ext);
            let x = pose.r_gc * (p_f - pose.t_gc);
            assert!(x.z > 0.5, "scene construction keeps the landmark in front");
            obs.push((clone.clone_id, Vector3::new(x.x / x.z, x.y / x.z, 1.0)));
        }
        (state, FeatureTrack { feature_id: 7, observations: obs }, p_f)
    }

    #[test]
    fn camera_pose_identity_and_lever_arm() {
        let clone = CloneState {
            clone_id: 0,
            timestamp: 0.0,
            q: UnitQuaternion::identity(),
            p: Vector3::new(1.0, 2.0, 3.0),
        };
        let pose = camera_pose(&clone, &Extrinsics::identity());
        assert_eq!(pose.r_gc, Matrix3::identity());
        assert_eq!(pose.t_gc, clone.p);

        let ext = Extrinsics { r_bc: Matrix3::identity(), p_bc: Vector3::new(0.1, 0.0, 0.0) };
        let pose = camera_pose(&clone, &ext);
        assert_eq!(pose.t_gc, Vector3::new(1.1, 2.0, 3.0));
    }

    #[test]
    fn camera_pose_matches_homogeneous_transform_oracle() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..100 {
            let clone = CloneState {
                clone_id: 0,
                timestamp: 0.0,
                q: rand_unit_quat(&mut rng, 2.0),
                p: rand_vec(&mut rng, 5.0),
            };
            let ext = Extrinsics { r_bc: rot_exp(&rand_vec(&mut rng, 2.0)), p_bc: rand_vec(&mut rng, 0.3) };
            let pose = camera_pose(&clone, &ext);

            // Oracle: compose 4x4 camera->body and body->global transforms;
            // the camera->global transform's inverse rotation and its
            // translation are what camera_pose returns.
            let mut t_gb = Matrix4::identity();
            t_gb.fixed_view_mut::<3, 3>(0, 0).copy_from(&clone.rot());
            t_gb.fixed_view_mut::<3, 1>(0, 3).copy_from(&clone.p);
            let mut t_bc = Matrix4::identity();
            t_bc.fixed_view_mut::<3, 3>(0, 0).copy_from(&ext.r_bc.transpose());
            t_bc.fixed_view_mut::<3, 1>(0, 3).copy_from(&ext.p_bc);
            let t_gc = t_gb * t_bc;
            let r_cg = t_gc.fixed_view::<3, 3>(0, 0).transpose();
            assert_relative_eq!(pose.r_gc, r_cg, epsilon = 1e-12);
            assert_relative_eq!(
                pose.t_gc,
                t_gc.fixed_view::<3, 1>(0, 3).clone_owned(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn base_selection_two_views_and_parallax_ordering() {
        let mut rng = StdRng::seed_from_u64(32);
        let ext = Extrinsics::identity();
        let (state, track, _) = make_scene(&mut rng, 2, &ext);
        let (poses, _) = track_poses(&track, &state, &ext).unwrap();
        let base = select_base_views(&track, &poses).unwrap();
        assert_eq!((base.j, base.k), (0, 1));

        // Three views, the first two at the same position: the only
        // parallax is against view 2, and the tie-break picks (0, 2).
        let mut state = NavState::new(crate::state::ImuState::identity());
        for (m, p) in [Vector3::zeros(), Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]
            .iter()
            .enumerate()
        {
            state.clones.push(CloneState {
                clone_id: m as u64,
                timestamp: m as f64,
                q: UnitQuaternion::identity(),
                p: *p,
            });
        }
        let p_f = Vector3::new(0.3, 0.2, 5.0);
        let obs = state
            .clones
            .iter()
            .map(|c| {
                let pose = camera_pose(c, &ext);
                let x = pose.r_gc * (p_f - pose.t_gc);
                (c.clone_id, Vector3::new(x.x / x.z, x.y / x.z, 1.0))
            })
            .collect();
        let track = FeatureTrack { feature_id: 0, observations: obs };
        let (poses, _) = track_poses(&track, &state, &ext).unwrap();
        let base = select_base_views(&track, &poses).unwrap();
        assert_eq!((base.j, base.k), (0, 2));
        assert!(!base.degenerate);
    }

    #[test]
    fn pure_rotation_track_is_degenerate() {
        let ext = Extrinsics::identity();
        let mut state = NavState::new(crate::state::ImuState::identity());
        let p_f = Vector3::new(0.1, -0.2, 6.0);
        let mut obs = Vec::new();
        for m in 0..3u64 {
            let clone = CloneState {
                clone_id: m,
                timestamp: m as f64,
                q: quat_from_small_angle(&Vector3::new(0.0, 0.05 * m as f64, 0.0)),
                p: Vector3::zeros(),
            };
            let pose = camera_pose(&clone, &ext);
            let x = pose.r_gc * (p_f - pose.t_gc);
            obs.push((m, Vector3::new(x.x / x.z, x.y / x.z, 1.0)));
            state.clones.push(clone);
        }
        let track = FeatureTrack { feature_id: 0, observations: obs };
        let (poses, _) = track_poses(&track, &state, &ext).unwrap();
        let base = select_base_views(&track, &poses).unwrap();
        assert!(base.degenerate);
    }

    #[test]
    fn po_point_direction_matches_projection_oracle() {
        let mut rng = StdRng::seed_from_u64(33);
        let ext = Extrinsics { r_bc: rot_exp(&rand_vec(&mut rng, 0.3)), p_bc: rand_vec(&mut rng, 0.1) };
        for _ in 0..20 {
            let (state, track, p_f) = make_scene(&mut rng, 4, &ext);
            let (poses, _) = track_poses(&track, &state, &ext).unwrap();
            let base = select_base_views(&track, &poses).unwrap();
            for i in 0..track.observations.len() {
                let p = po_point(&track, &base, i, &poses).unwrap();
                let truth = poses[i].r_gc * (p_f - poses[i].t_gc);
                assert_relative_eq!(p.normalize(), truth.normalize(), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn po_point_degenerate_and_negative_depth_errors() {
        let ext = Extrinsics::identity();
        // Two clones at the same position: zero baseline.
        let mut state = NavState::new(crate::state::ImuState::identity());
        for m in 0..2u64 {
            state.clones.push(CloneState {
                clone_id: m,
                timestamp: m as f64,
                q: UnitQuaternion::identity(),
                p: Vector3::zeros(),
            });
        }
        let track = FeatureTrack {
            feature_id: 0,
            observations: vec![
                (0, Vector3::new(0.0, 0.0, 1.0)),
                (1, Vector3::new(0.1, 0.0, 1.0)),
            ],
        };
        let (poses, _) = track_poses(&track, &state, &ext).unwrap();
        let base = BasePair { j: 0, k: 1, theta: 0.1, degenerate: false };
        assert!(matches!(
            po_point(&track, &base, 1, &poses),
            Err(VioError::DegenerateBaseline { .. })
        ));

        // Reversed ray on the second view puts the point behind camera 1.
        let mut rng = StdRng::seed_from_u64(34);
        let (state, mut track, _) = make_scene(&mut rng, 3, &ext);
        track.observations[2].1 = -track.observations[2].1 + Vector3::new(0.0, 0.0, 2.0);
        let (poses, _) = track_poses(&track, &state, &ext).unwrap();
        let base = BasePair { j: 0, k: 1, theta: 0.1, degenerate: false };
        let r = po_point(&track, &base, 2, &poses);
        // Either the depth flips sign or the construction stays in front;
        // the error is only required for the behind-camera case.
        if let Err(e) = r {
            assert!(matches!(e, VioError::NegativeDepth { view: 2 }));
        }
    }

    #[test]
    fn noise_free_residual_vanishes_and_base_j_excluded() {
        let mut rng = StdRng::seed_from_u64(35);
        let ext = Extrinsics { r_bc: rot_exp(&rand_vec(&mut rng, 0.2)), p_bc: rand_vec(&mut rng, 0.1) };
        for _ in 0..10 {
            let (state, track, _) = make_scene(&mut rng, 5, &ext);
            let (poses, _) = track_poses(&track, &state, &ext).unwrap();
            let base = select_base_views(&track, &poses).unwrap();
            let r = po_residual(&track, &base, &state, &ext).unwrap();
            assert_eq!(r.len(), 2 * (track.observations.len() - 1));
            assert!(r.amax() < 1e-9, "noise-free residual {:.2e}", r.amax());
        }
    }

    #[test]
    fn residual_perturbation_is_local() {
        let mut rng = StdRng::seed_from_u64(36);
        let ext = Extrinsics::identity();
        let (state, mut track, _) = make_scene(&mut rng, 4, &ext);
        let (poses, _) = track_poses(&track, &state, &ext).unwrap();
        let base = select_base_views(&track, &poses).unwrap();
        let views = residual_views(&track, &base);
        // Perturb a non-base observation: only its rows move, by the offset.
        let target = *views
            .iter()
            .find(|&&i| i != base.j && i != base.k)
            .expect("a free view exists");
        let r0 = po_residual(&track, &base, &state, &ext).unwrap();
        track.observations[target].1 += Vector3::new(1e-3, 0.0, 0.0);
        let r1 = po_residual(&track, &base, &state, &ext).unwrap();
        let d = r1 - r0;
        for (row, &i) in views.iter().enumerate() {
            if i == target {
                assert_relative_eq!(d[2 * row], 1e-3, epsilon = 1e-9);
                assert!(d[2 * row + 1].abs() < 1e-9);
            } else {
                assert!(d[2 * row].abs() < 1e-12 && d[2 * row + 1].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scale_cancellation_in_projection() {
        let mut rng = StdRng::seed_from_u64(37);
        let ext = Extrinsics::identity();
        let (state, track, _) = make_scene(&mut rng, 3, &ext);
        let (poses, _) = track_poses(&track, &state, &ext).unwrap();
        let base = select_base_views(&track, &poses).unwrap();
        for i in residual_views(&track, &base) {
            let p = po_point(&track, &base, i, &poses).unwrap();
            for s in [0.3, 1.0, 17.0] {
                assert_relative_eq!(project(&(s * p)), project(&p), epsilon = 1e-14);
            }
        }
    }

    /// Finite-difference oracle for the measurement Jacobian: perturb each
    /// error component through inject_correction and difference the
    /// predicted measurement h = obs - r (observations fixed, so
    /// dh = -dr).
    fn fd_jacobian(
        track: &FeatureTrack,
        base: &BasePair,
        state: &NavState,
        ext: &Extrinsics,
        convention: ErrorConvention,
    ) -> DMatrix<f64> {
        let layout = state.layout();
        let r0 = po_residual(track, base, state, ext).unwrap();
        let mut h = DMatrix::zeros(r0.len(), layout.dim());
        let eps = 1e-6;
        for c in 0..layout.dim() {
            let mut dx = DVector::zeros(layout.dim());
            dx[c] = eps;
            let sp = inject_correction(state, &dx, convention).unwrap();
            let rp = po_residual(track, base, &sp, ext).unwrap();
            dx[c] = -eps;
            let sm = inject_correction(state, &dx, convention).unwrap();
            let rm = po_residual(track, base, &sm, ext).unwrap();
            for row in 0..r0.len() {
                h[(row, c)] = -(rp[row] - rm[row]) / (2.0 * eps);
            }
        }
        h
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(38);
        for trial in 0..100 {
            let ext = if trial % 2 == 0 {
                Extrinsics::identity()
            } else {
                Extrinsics { r_bc: rot_exp(&rand_vec(&mut rng, 0.3)), p_bc: rand_vec(&mut rng, 0.1) }
            };
            let n_clones = 3 + (trial % 3);
            let (state, track, _) = make_scene(&mut rng, n_clones, &ext);
            let convention =
                if trial % 2 == 0 { ErrorConvention::Dst } else { ErrorConvention::Classical };
            let (poses, _) = track_poses(&track, &state, &ext).unwrap();
            let base = select_base_views(&track, &poses).unwrap();
            let h = po_jacobian(&track, &base, &state, &ext, convention).unwrap();
            let h_fd = fd_jacobian(&track, &base, &state, &ext, convention);
            let scale = h.amax();
            let err = (&h - &h_fd).amax();
            assert!(
                err / scale < 1e-4,
                "trial {trial}: rel error {:.2e} ({convention:?})",
                err / scale
            );
        }
    }

    #[test]
    fn jacobian_structure_zero_columns() {
        let mut rng = StdRng::seed_from_u64(39);
        let ext = Extrinsics::identity();
        // Five clones but a track touching only clones 1..=3.
        let (state, mut track, _) = make_scene(&mut rng, 5, &ext);
        track.observations.remove(4);
        track.observations.remove(0);
        let (poses, _) = track_poses(&track, &state, &ext).unwrap();
        let base = select_base_views(&track, &poses).unwrap();
        let h = po_jacobian(&track, &base, &state, &ext, ErrorConvention::Dst).unwrap();
        let layout = state.layout();
        // Inertial columns are identically zero.
        assert_eq!(h.view((0, 0), (h.nrows(), 15)).amax(), 0.0);
        // Clones 0 and 4 are untouched.
        for idx in [0usize, 4] {
            let s = layout.clone_start(idx);
            assert_eq!(h.view((0, s), (h.nrows(), 6)).amax(), 0.0);
        }
    }

    #[test]
    fn global_translation_is_in_the_nullspace() {
        // Summing the position columns over all clones applies the same
        // translation everywhere; relative geometry is invariant, so
        // H . N_translation = 0 — exactly, at any linearization point.
        let mut rng = StdRng::seed_from_u64(40);
        for _ in 0..10 {
            let ext = Extrinsics { r_bc: rot_exp(&rand_vec(&mut rng, 0.3)), p_bc: rand_vec(&mut rng, 0.1) };
            let (state, track, _) = make_scene(&mut rng, 4, &ext);
            let (poses, _) = track_poses(&track, &state, &ext).unwrap();
            let base = select_base_views(&track, &poses).unwrap();
            for convention in [ErrorConvention::Dst, ErrorConvention::Classical] {
                let h = po_jacobian(&track, &base, &state, &ext, convention).unwrap();
                let layout = state.layout();
                let mut n = DMatrix::zeros(layout.dim(), 3);
                for idx in 0..state.clones.len() {
                    let s = layout.clone_pos(idx).start;
                    for c in 0..3 {
                        n[(s + c, c)] = 1.0;
                    }
                }
                assert!((h * n).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn base_sensitivity_matches_finite_differences() {
        // Oracle: difference the stacked residual against perturbations of
        // the measured base-view bearings themselves.
        let mut rng = StdRng::seed_from_u64(45);
        let ext = Extrinsics::identity();
        for _ in 0..20 {
            let (state, track, _) = make_scene(&mut rng, 4, &ext);
            let (poses, _) = track_poses(&track, &state, &ext).unwrap();
            let base = select_base_views(&track, &poses).unwrap();
            let views = residual_views(&track, &base);
            let eps = 1e-7;
            for (which, v) in [(base.j, 0usize), (base.k, 1usize)] {
                for axis in 0..2 {
                    let mut plus = track.clone();
                    plus.observations[which].1[axis] += eps;
                    let mut minus = track.clone();
                    minus.observations[which].1[axis] -= eps;
                    let rp = po_residual(&plus, &base, &state, &ext).unwrap();
                    let rm = po_residual(&minus, &base, &state, &ext).unwrap();
                    for (row, &i) in views.iter().enumerate() {
                        let (a_j, b_k) =
                            po_row_base_sensitivity(&track, &base, &poses, i).unwrap();
                        let m = if v == 0 { a_j } else { b_k };
                        for r in 0..2 {
                            let fd = (rp[2 * row + r] - rm[2 * row + r]) / (2.0 * eps);
                            assert_relative_eq!(m[(r, axis)], fd, epsilon = 1e-5, max_relative = 1e-4);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn booked_noise_covers_monte_carlo_covariance() {
        // At the true state the residual is pure noise; its empirical
        // covariance, cross-row terms included, must match the booked
        // dense model, and the gate fed residuals that are noise-only must
        // accept at its design probability.
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = StdRng::seed_from_u64(46);
        let ext = Extrinsics::identity();
        let (state, clean, _) = make_scene(&mut rng, 5, &ext);
        let (poses, _) = track_poses(&clean, &state, &ext).unwrap();
        let base = select_base_views(&clean, &poses).unwrap();
        let sigma = 1e-3;
        let trials = 6000;
        let block = po_block(&clean, &base, &state, &ext, sigma, ErrorConvention::Dst).unwrap();
        let dim = block.r.len();
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        let p_zero = ErrorCovariance::from_matrix(DMatrix::zeros(
            state.layout().dim(),
            state.layout().dim(),
        ));
        let mut accepted = 0usize;
        for _ in 0..trials {
            let mut noisy = clean.clone();
            for (_, obs) in noisy.observations.iter_mut() {
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                obs.x += sigma * nx;
                obs.y += sigma * ny;
            }
            let r = po_residual(&noisy, &base, &state, &ext).unwrap();
            cov += &r * r.transpose();
            if chi2_gate(&r, &block.h, &p_zero, &block.r_meas).unwrap() {
                accepted += 1;
            }
        }
        cov /= trials as f64;
        // The booked matrix adds a floor on the right base view's rows
        // (its epipolar-line direction is first-order noise-free); remove
        // it to compare against the empirical covariance, then check the
        // floor is the only slack (booked covers empirical).
        let views = residual_views(&clean, &base);
        let k_row = views.iter().position(|&i| i == base.k).unwrap();
        let mut expected = block.r_meas.clone();
        expected[(2 * k_row, 2 * k_row)] -= K_ROW_FLOOR * sigma * sigma;
        expected[(2 * k_row + 1, 2 * k_row + 1)] -= K_ROW_FLOOR * sigma * sigma;
        let rel = (&cov - &expected).norm() / expected.norm();
        assert!(rel < 0.08, "covariance mismatch: rel {rel:.3}");
        // Slack bound sized for the extreme-value statistics of a sampled
        // covariance: per-entry jitter ~sqrt(2/trials) compounds into the
        // minimum eigenvalue across dim directions.
        let slack = &block.r_meas - &cov;
        let min_eig = nalgebra::SymmetricEigen::new((&slack + slack.transpose()) * 0.5)
            .eigenvalues
            .min();
        assert!(min_eig > -0.4 * sigma * sigma, "booked fails to cover: {min_eig:.3e}");
        let rate = accepted as f64 / trials as f64;
        assert!(
            (GATE_PROB - 0.02..GATE_PROB + 0.04).contains(&rate),
            "noise-only acceptance {rate}"
        );
    }

    #[test]
    fn gate_accepts_zero_rejects_large() {
        let mut rng = StdRng::seed_from_u64(41);
        let ext = Extrinsics::identity();
        let (state, track, _) = make_scene(&mut rng, 4, &ext);
        let (poses, _) = track_poses(&track, &state, &ext).unwrap();
        let base = select_base_views(&track, &poses).unwrap();
        let block = po_block(&track, &base, &state, &ext, 1e-3, ErrorConvention::Dst).unwrap();
        let p = ErrorCovariance::from_matrix(
            DMatrix::identity(state.layout().dim(), state.layout().dim()) * 1e-4,
        );
        assert!(chi2_gate(&DVector::zeros(block.r.len()), &block.h, &p, &block.r_meas).unwrap());
        let big = DVector::from_element(block.r.len(), 1e-1);
        assert!(!chi2_gate(&big, &block.h, &p, &block.r_meas).unwrap());
    }

    #[test]
    fn gate_monte_carlo_acceptance_rate() {
        // Noise-only residuals r ~ N(0, R) with H = 0: acceptance should
        // sit at the gate probability.
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = StdRng::seed_from_u64(42);
        let dim = 6;
        let sigma = 2.5e-3;
        let h = DMatrix::zeros(dim, 15);
        let p = ErrorCovariance::from_matrix(DMatrix::identity(15, 15));
        let r_meas = DMatrix::identity(dim, dim) * sigma * sigma;
        let mut accepted = 0;
        let trials = 1000;
        for _ in 0..trials {
            let r = DVector::from_fn(dim, |_, _| {
                let n: f64 = StandardNormal.sample(&mut rng);
                sigma * n
            });
            if chi2_gate(&r, &h, &p, &r_meas).unwrap() {
                accepted += 1;
            }
        }
        let rate = accepted as f64 / trials as f64;
        assert!((rate - 0.95).abs() < 0.02, "acceptance rate {rate}");
    }

    #[test]
    fn update_zero_residual_keeps_state_and_contracts_covariance() {
        let mut rng = StdRng::seed_from_u64(43);
        let ext = Extrinsics::identity();
        let (state, track, _) = make_scene(&mut rng, 4, &ext);
        let (poses, _) = track_poses(&track, &state, &ext).unwrap();
        let base = select_base_views(&track, &poses).unwrap();
        let mut block = po_block(&track, &base, &state, &ext, 1e-3, ErrorConvention::Dst).unwrap();
        block.r.fill(0.0);
        let dim = state.layout().dim();
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.gen::<f64>() - 0.5);
        let p = ErrorCovariance::from_matrix(&a * a.transpose() * 1e-4);
        let (new_state, new_p) = ekf_update(&state, &p, &block, ErrorConvention::Dst).unwrap();
        for (c0, c1) in state.clones.iter().zip(&new_state.clones) {
            assert_relative_eq!(c0.p, c1.p, epsilon = 1e-12);
        }
        // Loewner ordering: P_prior - P_post is PSD up to roundoff.
        let diff = &p.m - &new_p.m;
        let eig = nalgebra::SymmetricEigen::new((&diff + diff.transpose()) * 0.5).eigenvalues;
        assert!(eig.min() > -1e-10, "posterior exceeds prior: {:.2e}", eig.min());
    }

    #[test]
    fn noise_free_update_contracts_clone_error() {
        let mut rng = StdRng::seed_from_u64(44);
        let ext = Extrinsics::identity();
        let (truth, track, _) = make_scene(&mut rng, 4, &ext);
        let dim = truth.layout().dim();
        // Perturb one clone's position; covariance wide on clone positions.
        let mut dx = DVector::zeros(dim);
        let layout = truth.layout();
        dx[layout.clone_pos(2).start] = 0.01;
        dx[layout.clone_pos(2).start + 1] = -0.007;
        let mut est = inject_correction(&truth, &dx, ErrorConvention::Dst).unwrap();
        let mut p = ErrorCovariance::from_matrix(DMatrix::identity(dim, dim) * 1e-2);
        // A single feature observes only a 6-dim slice of the error space,
        // so the full-state contraction is partial; what must hold is that
        // the residual (the observable part) collapses while the state
        // error is monotone non-increasing (I - KH is a symmetric
        // contraction for isotropic P, up to the retraction remainder).
        let err_norm =
            |s: &NavState| crate::state::nav_error_between(s, &truth, ErrorConvention::Dst).norm();
        let mut prev = err_norm(&est);
        let initial = prev;
        let mut first_residual = None;
        let mut last_residual = 0.0;
        for _ in 0..5 {
            let (poses, _) = track_poses(&track, &est, &ext).unwrap();
            let base = select_base_views(&track, &poses).unwrap();
            let block = po_block(&track, &base, &est, &ext, 3e-4, ErrorConvention::Dst).unwrap();
            first_residual.get_or_insert(block.r.norm());
            last_residual = block.r.norm();
            let (next, np) = ekf_update(&est, &p, &block, ErrorConvention::Dst).unwrap();
            est = next;
            p = np;
            let e = err_norm(&est);
            // Slack covers the second-order retraction remainder.
            assert!(e <= prev * 1.01 + 1e-12, "error grew: {prev:.3e} -> {e:.3e}");
            prev = e;
        }
        let r0 = first_residual.unwrap();
        assert!(
            last_residual < 0.05 * r0,
            "residual did not collapse: {r0:.3e} -> {last_residual:.3e}"
        );
        assert!(prev < initial, "no net contraction: {initial:.3e} -> {prev:.3e}");
    }
}
