//! Attitude arithmetic and the error conventions used throughout the filter.
//!
//! Conventions:
//! - Hamilton quaternions, `q` maps body-frame vectors into the global frame:
//!   `v_G = R(q) v_b`.
//! - Attitude error is left-multiplicative in the global frame. With estimate
//!   `R_est` and small angle `phi`, the corrected (true) attitude is
//!   `R = Exp([phi x]) * R_est`, equivalently `R_est = (I - [phi x]) R` to
//!   first order.
//! - Quaternion sign is canonicalized to `w >= 0` after every operation so
//!   serialized output and test comparisons are deterministic.
//!
//! Error injection uses the exact SO(3) exponential rather than the literal
//! first-order factor: it preserves orthonormality without periodic
//! re-orthogonalization and agrees with the first-order form to O(|phi|^2).

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Small-angle rotation vector (radians). Only meaningful where |phi| << 1,
/// though all maps below are exact for any magnitude.
pub type SmallAngle = Vector3<f64>;

/// Cross-product matrix: `skew(a) * b == a x b`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Canonical quaternion sign: flips the representative so that `w >= 0`.
/// The rotation is unchanged (q and -q encode the same rotation).
pub fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(Quaternion::new(-q.w, -q.i, -q.j, -q.k))
    } else {
        q
    }
}

/// Exact quaternion exponential of a rotation vector:
/// `q = [cos(|phi|/2), sin(|phi|/2) phi/|phi|]`, identity at phi = 0.
pub fn quat_from_small_angle(phi: &SmallAngle) -> UnitQuaternion<f64> {
    canonicalize(UnitQuaternion::from_scaled_axis(*phi))
}

/// Exact SO(3) exponential as a rotation matrix.
pub fn rot_exp(phi: &SmallAngle) -> Matrix3<f64> {
    *quat_from_small_angle(phi).to_rotation_matrix().matrix()
}

/// SO(3) logarithm: rotation vector of `r` (angle in [0, pi]).
pub fn rot_log(r: &Matrix3<f64>) -> Vector3<f64> {
    UnitQuaternion::from_matrix(r).scaled_axis()
}

/// Applies the left attitude correction: returns `Exp([phi x]) * r_est`, the
/// corrected attitude consistent with `R_est = (I - [phi x]) R`.
pub fn apply_attitude_error(r_est: &Matrix3<f64>, phi: &SmallAngle) -> Matrix3<f64> {
    rot_exp(phi) * r_est
}

/// Quaternion form of [`apply_attitude_error`]: `Exp_q(phi) ⊗ q_est`.
pub fn apply_attitude_error_quat(
    q_est: &UnitQuaternion<f64>,
    phi: &SmallAngle,
) -> UnitQuaternion<f64> {
    canonicalize(quat_from_small_angle(phi) * q_est)
}

/// Hamilton product with canonical sign.
pub fn quat_mul(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    canonicalize(a * b)
}

/// Rotation matrix of a unit quaternion (body→global when `q` is an attitude).
pub fn quat_to_rot(q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    *q.to_rotation_matrix().matrix()
}

/// Left Jacobian of SO(3): `J_l(phi) = I + (1-cos a)/a^2 [phi x] + (a - sin a)/a^3 [phi x]^2`
/// with `a = |phi|`. Satisfies `Exp(phi + d) ≈ Exp(J_l(phi) d) Exp(phi)`.
pub fn so3_left_jacobian(phi: &SmallAngle) -> Matrix3<f64> {
    let a = phi.norm();
    let s = skew(phi);
    if a < 1e-8 {
        // Series: I + [phi x]/2 + [phi x]^2/6.
        return Matrix3::identity() + 0.5 * s + s * s / 6.0;
    }
    let a2 = a * a;
    Matrix3::identity() + ((1.0 - a.cos()) / a2) * s + ((a - a.sin()) / (a2 * a)) * (s * s)
}

/// Checks orthonormality and det(+1) of a candidate rotation matrix.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let e = (r.transpose() * r - Matrix3::identity()).abs().max();
    e < tol && (r.determinant() - 1.0).abs() < tol
}
