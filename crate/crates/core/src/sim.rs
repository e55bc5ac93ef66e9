//! Synthetic camera-IMU data generation.
//!
//! Ground truth is defined as the discrete mechanization rollout of
//! inverse-mechanized analytic templates: the template supplies smooth
//! attitude and velocity curves, the generator solves each IMU interval for
//! the (rate, specific-force) pair that the trapezoidal mechanization maps
//! exactly onto the template's next sample, and the recorded truth is that
//! rollout. Noise-free mechanization of the generated IMU therefore
//! reproduces the truth to rounding error, and noisy runs inherit an
//! exactly-consistent generative model.
//!
//! Randomness comes from a single ChaCha20 stream (documented algorithm,
//! reproducible across platforms) seeded from the world description.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::{canonicalize, quat_from_small_angle, quat_mul, quat_to_rot};
use crate::po::{camera_pose, Extrinsics};
use crate::propagation::{ImuSample, NoiseParams, WorldParams};
use crate::state::{CloneState, ImuState};

/// Parametric trajectory families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryKind {
    /// Stationary at the origin, identity attitude.
    Static,
    /// Along +x at `speed` m/s with small attitude/velocity oscillation
    /// for observability excitation.
    Line { speed: f64 },
    /// Horizontal circle, yaw following the tangent.
    Circle { radius: f64, rate: f64 },
    /// Band-limited random walk in attitude and velocity (seeded).
    RandomWalk,
    /// Nearly stationary platform panning back and forth: centimeter
    /// position jitter under a wide yaw sweep. Baselines inside the clone
    /// window stay tiny, which is the regime that separates pair-based
    /// reprojection from explicit landmark solves.
    Scan { sweep_deg: f64, period_s: f64 },
}

/// Full description of a simulated world.
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub kind: TrajectoryKind,
    pub duration_s: f64,
    pub imu_rate_hz: f64,
    pub cam_rate_hz: f64,
    pub noise: NoiseParams,
    /// Pixel noise, converted to normalized units through `focal_px`.
    pub sigma_px: f64,
    pub focal_px: f64,
    pub fov_deg: f64,
    pub n_landmarks: usize,
    /// Landmark box margin beyond the trajectory bounding box; smaller
    /// margins put features closer and raise track parallax.
    pub landmark_margin: Vector3<f64>,
    /// Extra landmarks on a distant shell (skyline points): long tracks
    /// with almost no parallax, informative about attitude only.
    pub far_landmarks: usize,
    /// Shell distance for the far landmarks, m.
    pub far_radius: f64,
    /// Far clipping depth for feature visibility, m.
    pub max_depth: f64,
    pub ext: Extrinsics,
    pub world: WorldParams,
    pub seed: u64,
    /// Mixed into the sensor-noise streams only: varying this while `seed`
    /// stays fixed redraws the noise over an identical scenario (same
    /// trajectory and landmark field), the common-scenario Monte Carlo
    /// design used by the consistency and ablation studies.
    pub noise_seed: u64,
    pub bias_g0: Vector3<f64>,
    pub bias_a0: Vector3<f64>,
}

impl Default for SimWorld {
    fn default() -> Self {
        SimWorld {
            kind: TrajectoryKind::Circle { radius: 5.0, rate: 0.25 },
            duration_s: 60.0,
            imu_rate_hz: 200.0,
            cam_rate_hz: 20.0,
            noise: NoiseParams { sigma_g: 2e-4, sigma_a: 2e-3, sigma_bg: 2e-6, sigma_ba: 2e-5 },
            sigma_px: 1.0,
            focal_px: 460.0,
            fov_deg: 100.0,
            n_landmarks: 200,
            landmark_margin: Vector3::new(8.0, 8.0, 4.0),
            far_landmarks: 0,
            far_radius: 300.0,
            max_depth: 50.0,
            ext: Extrinsics::forward_camera(),
            world: WorldParams::default(),
            seed: 0,
            noise_seed: 0,
            bias_g0: Vector3::new(2e-3, -1e-3, 1.5e-3),
            bias_a0: Vector3::new(2e-2, 1e-2, -1.5e-2),
        }
    }
}

impl Extrinsics {
    /// Camera looking along body +x (forward), x right (-body y),
    /// y down (-body z); zero lever arm.
    pub fn forward_camera() -> Extrinsics {
        Extrinsics {
            r_bc: nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            p_bc: Vector3::zeros(),
        }
    }
}

/// Ground-truth sample at an IMU epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub q: UnitQuaternion<f64>,
    pub v: Vector3<f64>,
    pub p: Vector3<f64>,
}

impl TrajectorySample {
    pub fn rot(&self) -> nalgebra::Matrix3<f64> {
        quat_to_rot(&self.q)
    }
}

/// One camera epoch: timestamp and (feature_id, normalized xy) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CamFrame {
    pub t: f64,
    pub obs: Vec<(u64, Vector2<f64>)>,
}

/// Everything a filter run consumes.
#[derive(Debug, Clone)]
pub struct SimData {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<CamFrame>,
    pub truth: Vec<TrajectorySample>,
    pub truth_bias: Vec<(f64, Vector3<f64>, Vector3<f64>)>,
    pub landmarks: Vec<Vector3<f64>>,
    /// Observation noise std in normalized units (sigma_px / focal_px).
    pub sigma_n: f64,
}

impl SimData {
    pub fn truth_at_start(&self) -> ImuState {
        let s = &self.truth[0];
        ImuState {
            q: s.q,
            v: s.v,
            p: s.p,
            bg: self.truth_bias[0].1,
            ba: self.truth_bias[0].2,
        }
    }

    /// Truth sample at the given timestamp (exact epoch match expected).
    pub fn truth_at(&self, t: f64) -> Option<&TrajectorySample> {
        self.truth.iter().min_by(|a, b| {
            (a.t - t).abs().partial_cmp(&(b.t - t).abs()).expect("finite times")
        })
    }
}

/// Analytic template pose/velocity at time t.
fn template(kind: &TrajectoryKind, rng_walk: &[(f64, Vector3<f64>, Vector3<f64>)], t: f64)
    -> (UnitQuaternion<f64>, Vector3<f64>, Vector3<f64>) {
    match kind {
        TrajectoryKind::Static => {
            (UnitQuaternion::identity(), Vector3::zeros(), Vector3::zeros())
        }
        TrajectoryKind::Line { speed } => {
            // Forward speed modulation plus gentle roll/yaw wobble: gives
            // the rotation and jerk the observability analysis needs.
            let s = *speed;
            let v = Vector3::new(
                s + 0.3 * (0.9 * t).sin(),
                0.25 * (0.7 * t).cos(),
                0.2 * (1.1 * t).sin(),
            );
            let p = Vector3::new(
                s * t - (0.3 / 0.9) * ((0.9 * t).cos() - 1.0),
                (0.25 / 0.7) * (0.7 * t).sin(),
                -(0.2 / 1.1) * ((1.1 * t).cos() - 1.0),
            );
            let ypr = Vector3::new(
                0.15 * (0.6 * t).sin(),
                0.12 * (0.8 * t).cos() - 0.12,
                0.2 * (0.5 * t).sin(),
            );
            let q = quat_mul(
                &quat_from_small_angle(&Vector3::new(0.0, 0.0, ypr.z)),
                &quat_from_small_angle(&Vector3::new(ypr.x, ypr.y, 0.0)),
            );
            (q, v, p)
        }
        TrajectoryKind::Circle { radius, rate } => {
            let (r, w) = (*radius, *rate);
            let a = w * t;
            let p = Vector3::new(r * a.cos(), r * a.sin(), 0.5 * (0.4 * t).sin());
            let v = Vector3::new(-r * w * a.sin(), r * w * a.cos(), 0.2 * (0.4 * t).cos());
            // Yaw tracks the tangent; small roll oscillation on top.
            let yaw = a + std::f64::consts::FRAC_PI_2;
            let q = quat_mul(
                &quat_from_small_angle(&Vector3::new(0.0, 0.0, yaw)),
                &quat_from_small_angle(&Vector3::new(0.1 * (0.7 * t).sin(), 0.0, 0.0)),
            );
            (q, v, p)
        }
        TrajectoryKind::Scan { sweep_deg, period_s } => {
            let half = 0.5 * sweep_deg.to_radians();
            let wy = 2.0 * std::f64::consts::PI / period_s;
            // Hand-held jitter: a few centimeters at arm-tremor frequencies.
            let (ax, ay, az) = (0.08, 0.06, 0.05);
            let (wx, wyy, wz) = (1.2, 0.9, 1.5);
            let p = Vector3::new(ax * (wx * t).sin(), ay * (wyy * t).sin(), az * (wz * t).sin());
            let v = Vector3::new(
                ax * wx * (wx * t).cos(),
                ay * wyy * (wyy * t).cos(),
                az * wz * (wz * t).cos(),
            );
            let yaw = half * (wy * t).sin();
            let q = quat_mul(
                &quat_from_small_angle(&Vector3::new(0.0, 0.0, yaw)),
                &quat_from_small_angle(&Vector3::new(
                    0.08 * (0.5 * t).sin(),
                    0.06 * ((0.75 * t).cos() - 1.0),
                    0.0,
                )),
            );
            (q, v, p)
        }
        TrajectoryKind::RandomWalk => {
            // Sum of seeded sinusoids: (omega, v-amp, angle-amp) triples.
            let mut v = Vector3::zeros();
            let mut p = Vector3::zeros();
            let mut ang = Vector3::zeros();
            for (i, (w, va, aa)) in rng_walk.iter().enumerate() {
                let ph = 0.7 * i as f64;
                v += va * (w * t + ph).sin();
                p += va * (-((w * t + ph).cos() - ph.cos()) / w);
                ang += aa * (w * t + 1.3 * ph).sin();
            }
            (quat_from_small_angle(&ang), v, p)
        }
    }
}

/// Inverse mechanization of one interval: the (gyro, accel) pair that the
/// trapezoidal mechanization maps (q0, v0) exactly to (q1, v1).
fn invert_step(
    q0: &UnitQuaternion<f64>,
    q1: &UnitQuaternion<f64>,
    v0: &Vector3<f64>,
    v1: &Vector3<f64>,
    world: &WorldParams,
    dt: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let q_rel = canonicalize(q0.inverse() * q1);
    let omega_body = q_rel.scaled_axis() / dt;
    // propagate_mean subtracts the transport rate; add it back so the
    // measured rate regenerates the same relative rotation.
    let r0 = quat_to_rot(q0);
    let gyro = omega_body + r0.transpose() * world.omega_g;
    let r1 = quat_to_rot(q1);
    let avg = 0.5 * (r0 + r1);
    let rhs = (v1 - v0) / dt - world.gravity + 2.0 * world.omega_g.cross(v0);
    let accel = avg.lu().solve(&rhs).expect("average rotation invertible for small steps");
    (gyro, accel)
}

/// Generates IMU, camera frames, ground truth, and the landmark field.
pub fn generate(world: &SimWorld) -> SimData {
    assert!(world.imu_rate_hz >= world.cam_rate_hz, "IMU rate below camera rate");
    let ratio = world.imu_rate_hz / world.cam_rate_hz;
    assert!(
        (ratio - ratio.round()).abs() < 1e-9,
        "IMU rate must be an integer multiple of the camera rate"
    );
    let ratio = ratio.round() as usize;
    let dt = 1.0 / world.imu_rate_hz;
    let n_steps = (world.duration_s * world.imu_rate_hz).round() as usize;

    let mut rng = ChaCha20Rng::seed_from_u64(world.seed);
    // Draw sub-streams in a fixed order so data kinds stay decoupled; the
    // noise streams additionally mix in `noise_seed` (zero leaves them
    // unchanged) so one scenario can be re-rolled with fresh noise.
    let mut rng_walk_params = ChaCha20Rng::seed_from_u64(rng.gen());
    let mut rng_landmarks = ChaCha20Rng::seed_from_u64(rng.gen());
    let mut rng_imu_noise =
        ChaCha20Rng::seed_from_u64(rng.gen::<u64>() ^ (world.noise_seed.wrapping_mul(0x9E3779B97F4A7C15)));
    let mut rng_cam_noise =
        ChaCha20Rng::seed_from_u64(rng.gen::<u64>() ^ (world.noise_seed.wrapping_mul(0xD1B54A32D192ED03)));

    let walk: Vec<(f64, Vector3<f64>, Vector3<f64>)> = (0..5)
        .map(|i| {
            let w = 0.25 + 0.45 * (i as f64) + 0.1 * rng_walk_params.gen::<f64>();
            let va = Vector3::from_fn(|_, _| 0.35 * (rng_walk_params.gen::<f64>() - 0.5));
            let aa = Vector3::from_fn(|_, _| 0.12 * (rng_walk_params.gen::<f64>() - 0.5));
            (w, va, aa)
        })
        .collect();

    // Template samples on the IMU grid, then the exact rollout.
    let mut truth: Vec<TrajectorySample> = Vec::with_capacity(n_steps + 1);
    let (q0, v0, p0) = template(&world.kind, &walk, 0.0);
    truth.push(TrajectorySample { t: 0.0, q: q0, v: v0, p: p0 });
    let mut ideal_inputs: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let t1 = (k + 1) as f64 * dt;
        let (q1, v1, _) = template(&world.kind, &walk, t1);
        let prev = truth.last().unwrap().clone();
        let (gyro, accel) = invert_step(&prev.q, &q1, &prev.v, &v1, &world.world, dt);
        // Roll the mechanization forward to define the truth sample; the
        // position is the trapezoidal integral of the template velocity.
        let state = ImuState { q: prev.q, v: prev.v, p: prev.p, bg: Vector3::zeros(), ba: Vector3::zeros() };
        let sample = ImuSample { timestamp: prev.t, gyro, accel };
        let next = crate::propagation::propagate_mean(&state, &sample, &world.world, dt);
        truth.push(TrajectorySample { t: t1, q: next.q, v: next.v, p: next.p });
        ideal_inputs.push((gyro, accel));
    }

    // Sensor streams: white noise with discrete std sigma/sqrt(dt) plus a
    // bias random walk with std sigma_b*sqrt(dt) per step.
    let sqdt = dt.sqrt();
    let mut bg = world.bias_g0;
    let mut ba = world.bias_a0;
    let mut truth_bias = Vec::with_capacity(n_steps + 1);
    truth_bias.push((0.0, bg, ba));
    let mut imu = Vec::with_capacity(n_steps);
    let gauss3 = |rng: &mut ChaCha20Rng| -> Vector3<f64> {
        Vector3::from_fn(|_, _| StandardNormal.sample(rng))
    };
    for (k, (gyro_ideal, accel_ideal)) in ideal_inputs.iter().enumerate() {
        let t = k as f64 * dt;
        let ng = gauss3(&mut rng_imu_noise) * (world.noise.sigma_g / sqdt);
        let na = gauss3(&mut rng_imu_noise) * (world.noise.sigma_a / sqdt);
        imu.push(ImuSample {
            timestamp: t,
            gyro: gyro_ideal + bg + ng,
            accel: accel_ideal + ba + na,
        });
        bg += gauss3(&mut rng_imu_noise) * (world.noise.sigma_bg * sqdt);
        ba += gauss3(&mut rng_imu_noise) * (world.noise.sigma_ba * sqdt);
        truth_bias.push(((k + 1) as f64 * dt, bg, ba));
    }

    // Landmark field: a box around the trajectory with margin.
    let (mut lo, mut hi) = (Vector3::repeat(f64::MAX), Vector3::repeat(f64::MIN));
    for s in &truth {
        lo = lo.inf(&s.p);
        hi = hi.sup(&s.p);
    }
    let lo = lo - world.landmark_margin;
    let hi = hi + world.landmark_margin;
    let mut landmarks: Vec<Vector3<f64>> = (0..world.n_landmarks)
        .map(|_| {
            Vector3::from_fn(|i, _| lo[i] + (hi[i] - lo[i]) * rng_landmarks.gen::<f64>())
        })
        .collect();
    // Far shell: uniform directions on the upper hemisphere around the
    // trajectory centroid. Drawn after the near field so adding them does
    // not perturb the near layout for a given seed.
    let centroid = truth.iter().fold(Vector3::zeros(), |acc, s| acc + s.p) / truth.len() as f64;
    for _ in 0..world.far_landmarks {
        let dir = loop {
            let v = Vector3::from_fn(|_, _| {
                let z: f64 = StandardNormal.sample(&mut rng_landmarks);
                z
            });
            if v.norm() > 1e-6 {
                let mut d = v.normalize();
                d.z = d.z.abs();
                break d;
            }
        };
        let r = world.far_radius * (0.8 + 0.4 * rng_landmarks.gen::<f64>());
        landmarks.push(centroid + dir * r);
    }

    // Camera frames at every `ratio`-th IMU epoch (including t = 0).
    let sigma_n = world.sigma_px / world.focal_px;
    let tan_half_fov = (world.fov_deg.to_radians() / 2.0).tan();
    let mut frames = Vec::new();
    let mut k = 0usize;
    while k <= n_steps {
        let s = &truth[k];
        let clone = CloneState { clone_id: 0, timestamp: s.t, q: s.q, p: s.p };
        let pose = camera_pose(&clone, &world.ext);
        let mut obs = Vec::new();
        for (fid, p_f) in landmarks.iter().enumerate() {
            let x = pose.r_gc * (p_f - pose.t_gc);
            if x.z < 0.4 || x.z > world.max_depth {
                continue;
            }
            let (bx, by) = (x.x / x.z, x.y / x.z);
            if bx.abs() > tan_half_fov || by.abs() > tan_half_fov {
                continue;
            }
            let nx: f64 = StandardNormal.sample(&mut rng_cam_noise);
            let ny: f64 = StandardNormal.sample(&mut rng_cam_noise);
            obs.push((fid as u64, Vector2::new(bx + sigma_n * nx, by + sigma_n * ny)));
        }
        frames.push(CamFrame { t: s.t, obs });
        k += ratio;
    }

    SimData { imu, frames, truth, truth_bias, landmarks, sigma_n }
}
