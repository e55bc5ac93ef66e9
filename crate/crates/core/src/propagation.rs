//! Continuous-time error dynamics of the state-transformed filter,
//! discretization, INS mean propagation, and covariance propagation.
//!
//! Error-state ordering: [phi, d_v, d_p, d_bg, d_ba] (15), then clones.
//! With the conventions documented in `state`, the continuous dynamics are
//!
//! ```text
//! d/dt phi = −[w_G x] phi − R d_bg − R w_g
//! d/dt d_v = (−[g_G x] − [v x][w_G x]) phi − 2[w_G x] d_v + [v x]R d_bg + R d_ba
//!            + [v x]R w_g + R w_a
//! d/dt d_p = [p x][w_G x] phi + d_v + [p x]R d_bg + [p x]R w_g
//! d/dt d_bg = w_wg,  d/dt d_ba = w_wa
//! ```
//!
//! Note the transformed velocity row carries no specific-force term: the
//! state transformation absorbs it, which is what keeps the linearization
//! independent of the (noisy) velocity/position estimates up to the [v x],
//! [p x] lever arms evaluated at the state itself.
//!
//! The classical (untransformed) dynamics used by the ablation variants are
//! provided alongside; their velocity row couples attitude through the
//! specific force, `d/dt d_v = [R a x] phi + R d_ba + ...`, which is the
//! estimate-dependent term the transformation removes.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

use crate::error::VioError;
use crate::geometry::{quat_from_small_angle, skew};
use crate::state::{ErrorCovariance, ImuState, CLONE_DIM, IMU_DIM};

pub type FMatrix = SMatrix<f64, 15, 15>;
pub type GMatrix = SMatrix<f64, 15, 12>;

/// One IMU measurement: body-frame angular rate and specific force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Sensor noise spectral densities (continuous-time).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// Gyro white noise, rad/s/sqrt(Hz).
    pub sigma_g: f64,
    /// Accel white noise, m/s^2/sqrt(Hz).
    pub sigma_a: f64,
    /// Gyro bias random walk, rad/s^2/sqrt(Hz).
    pub sigma_bg: f64,
    /// Accel bias random walk, m/s^3/sqrt(Hz).
    pub sigma_ba: f64,
}

impl NoiseParams {
    /// 12x12 continuous process-noise density diag(g, a, bg, ba).
    pub fn qc(&self) -> SMatrix<f64, 12, 12> {
        let mut q = SMatrix::<f64, 12, 12>::zeros();
        for i in 0..3 {
            q[(i, i)] = self.sigma_g * self.sigma_g;
            q[(3 + i, 3 + i)] = self.sigma_a * self.sigma_a;
            q[(6 + i, 6 + i)] = self.sigma_bg * self.sigma_bg;
            q[(9 + i, 9 + i)] = self.sigma_ba * self.sigma_ba;
        }
        q
    }
}

/// Global-frame constants. `omega_g` is the earth rotation expressed in {G};
/// zero unless the earth-rotation flag is on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    pub gravity: Vector3<f64>,
    pub omega_g: Vector3<f64>,
}

pub const EARTH_RATE: f64 = 7.292115e-5;

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams { gravity: Vector3::new(0.0, 0.0, -9.81), omega_g: Vector3::zeros() }
    }
}

impl WorldParams {
    /// ENU frame at the given latitude with earth rotation enabled.
    pub fn with_earth_rotation(latitude_rad: f64) -> Self {
        WorldParams {
            gravity: Vector3::new(0.0, 0.0, -9.81),
            omega_g: Vector3::new(0.0, EARTH_RATE * latitude_rad.cos(), EARTH_RATE * latitude_rad.sin()),
        }
    }
}

/// Continuous Jacobians of the transformed error dynamics (15x15, 15x12).
pub fn continuous_jacobians(state: &ImuState, world: &WorldParams) -> (FMatrix, GMatrix) {
    let r = state.rot();
    let sv = skew(&state.v);
    let sp = skew(&state.p);
    let sw = skew(&world.omega_g);
    let sg = skew(&world.gravity);

    let mut f = FMatrix::zeros();
    // Attitude row.
    f.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-sw));
    f.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-r));
    // Transformed velocity row.
    f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-sg - sv * sw));
    f.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-2.0 * sw));
    f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(sv * r));
    f.fixed_view_mut::<3, 3>(3, 12).copy_from(&r);
    // Transformed position row.
    f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(sp * sw));
    f.fixed_view_mut::<3, 3>(6, 3).copy_from(&Matrix3::identity());
    f.fixed_view_mut::<3, 3>(6, 9).copy_from(&(sp * r));

    let mut g = GMatrix::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(sv * r));
    g.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    g.fixed_view_mut::<3, 3>(6, 0).copy_from(&(sp * r));
    g.fixed_view_mut::<3, 3>(9, 6).copy_from(&Matrix3::identity());
    g.fixed_view_mut::<3, 3>(12, 9).copy_from(&Matrix3::identity());
    (f, g)
}

/// Continuous Jacobians under the classical error convention. The velocity
/// row needs the current bias-corrected specific force.
pub fn continuous_jacobians_classical(
    state: &ImuState,
    accel_hat: &Vector3<f64>,
    world: &WorldParams,
) -> (FMatrix, GMatrix) {
    let r = state.rot();
    let sw = skew(&world.omega_g);

    let mut f = FMatrix::zeros();
    f.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-sw));
    f.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-r));
    f.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&(r * accel_hat)));
    f.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-2.0 * sw));
    f.fixed_view_mut::<3, 3>(3, 12).copy_from(&r);
    f.fixed_view_mut::<3, 3>(6, 3).copy_from(&Matrix3::identity());

    let mut g = GMatrix::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    g.fixed_view_mut::<3, 3>(9, 6).copy_from(&Matrix3::identity());
    g.fixed_view_mut::<3, 3>(12, 9).copy_from(&Matrix3::identity());
    (f, g)
}

/// Discretization method for the transition matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// Phi = I + F dt + (F dt)^2 / 2.
    #[default]
    SecondOrder,
    /// Scaling-and-squaring matrix exponential.
    ExactExp,
}

/// Discrete process-noise form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QdForm {
    /// Qd = Phi G Qc Gᵀ Phiᵀ dt.
    #[default]
    Congruent,
    /// Qd = (Phi G Qc Gᵀ Phiᵀ + G Qc Gᵀ) dt / 2.
    Trapezoidal,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DiscretizationOptions {
    pub method: Discretization,
    pub qd_form: QdForm,
}

/// One-step transition over the inertial block. The full-state transition
/// embeds `phi_b` with identity over clone blocks and zero process noise
/// there; the embedding is materialized lazily (`full_phi`, `full_qd`) and
/// exploited block-wise in `propagate_covariance`.
#[derive(Debug, Clone)]
pub struct TransitionBundle {
    pub phi_b: FMatrix,
    pub qd_b: FMatrix,
    pub dt: f64,
}

impl TransitionBundle {
    pub fn full_phi(&self, n_clones: usize) -> DMatrix<f64> {
        let n = IMU_DIM + CLONE_DIM * n_clones;
        let mut phi = DMatrix::identity(n, n);
        phi.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&self.phi_b);
        phi
    }

    pub fn full_qd(&self, n_clones: usize) -> DMatrix<f64> {
        let n = IMU_DIM + CLONE_DIM * n_clones;
        let mut qd = DMatrix::zeros(n, n);
        qd.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&self.qd_b);
        qd
    }

    /// Composes `self` (earlier step) with `later`, accumulating noise:
    /// Phi = Phi_later Phi_self, Qd = Phi_later Qd_self Phi_laterᵀ + Qd_later.
    pub fn compose(&self, later: &TransitionBundle) -> TransitionBundle {
        TransitionBundle {
            phi_b: later.phi_b * self.phi_b,
            qd_b: later.phi_b * self.qd_b * later.phi_b.transpose() + later.qd_b,
            dt: self.dt + later.dt,
        }
    }

    pub fn identity() -> TransitionBundle {
        TransitionBundle { phi_b: FMatrix::identity(), qd_b: FMatrix::zeros(), dt: 0.0 }
    }
}

/// Scaling-and-squaring matrix exponential (Taylor core), adequate for the
/// small well-scaled matrices used here.
pub fn expm15(a: &FMatrix) -> FMatrix {
    let norm = a.abs().row_sum().max();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let b = a / 2f64.powi(s as i32);
    let mut term = FMatrix::identity();
    let mut acc = FMatrix::identity();
    for k in 1..=14 {
        term = (term * b) / k as f64;
        acc += term;
    }
    for _ in 0..s {
        acc = acc * acc;
    }
    acc
}

/// Builds the one-step transition bundle for the inertial block.
pub fn discretize(
    f: &FMatrix,
    g: &GMatrix,
    noise: &NoiseParams,
    dt: f64,
    opts: DiscretizationOptions,
) -> Result<TransitionBundle, VioError> {
    if dt <= 0.0 {
        return Err(VioError::Numerical(format!("nonpositive dt {dt}")));
    }
    let fdt = f * dt;
    let phi = match opts.method {
        Discretization::SecondOrder => FMatrix::identity() + fdt + fdt * fdt * 0.5,
        Discretization::ExactExp => expm15(&fdt),
    };
    let gqg = g * noise.qc() * g.transpose();
    let qd = match opts.qd_form {
        QdForm::Congruent => phi * gqg * phi.transpose() * dt,
        QdForm::Trapezoidal => (phi * gqg * phi.transpose() + gqg) * (0.5 * dt),
    };
    // Symmetrize against accumulated rounding.
    let qd = (qd + qd.transpose()) * 0.5;
    Ok(TransitionBundle { phi_b: phi, qd_b: qd, dt })
}

/// INS mechanization over one IMU interval (single-sample trapezoidal):
/// attitude from the bias-corrected gyro (minus the earth-rate transport
/// term when enabled), velocity from the average-rotated specific force
/// plus gravity and Coriolis, position by trapezoidal velocity integration.
pub fn propagate_mean(
    state: &ImuState,
    sample: &ImuSample,
    world: &WorldParams,
    dt: f64,
) -> ImuState {
    let r = state.rot();
    let w_b = sample.gyro - state.bg - r.transpose() * world.omega_g;
    let q_next = crate::geometry::quat_mul(&state.q, &quat_from_small_angle(&(w_b * dt)));
    let r_next = crate::geometry::quat_to_rot(&q_next);
    let f_b = sample.accel - state.ba;
    let accel_g =
        0.5 * (r + r_next) * f_b + world.gravity - 2.0 * world.omega_g.cross(&state.v);
    let v_next = state.v + accel_g * dt;
    let p_next = state.p + 0.5 * (state.v + v_next) * dt;
    ImuState { q: q_next, v: v_next, p: p_next, bg: state.bg, ba: state.ba }
}

/// P ← Phi P Phiᵀ + Qd over the full layout, exploiting the identity clone
/// blocks: P_bb ← Phi P_bb Phiᵀ + Qd, P_bc ← Phi P_bc, P_cc unchanged.
pub fn propagate_covariance(
    p: &mut ErrorCovariance,
    bundle: &TransitionBundle,
) -> Result<(), VioError> {
    let n = p.dim();
    if n < IMU_DIM || (n - IMU_DIM) % CLONE_DIM != 0 {
        return Err(VioError::DimensionMismatch { expected: IMU_DIM, got: n });
    }
    let pbb = p.m.view((0, 0), (IMU_DIM, IMU_DIM)).clone_owned();
    let new_bb = bundle.phi_b * pbb * bundle.phi_b.transpose() + bundle.qd_b;
    p.m.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&new_bb);
    if n > IMU_DIM {
        let pbc = p.m.view((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).clone_owned();
        let new_bc = bundle.phi_b * pbc;
        p.m.view_mut((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).copy_from(&new_bc);
        p.m.view_mut((IMU_DIM, 0), (n - IMU_DIM, IMU_DIM)).copy_from(&new_bc.transpose());
    }
    p.symmetrize();
    Ok(())
}
