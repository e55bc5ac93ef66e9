//! Sliding-window visual-inertial filter tying propagation, clone
//! management, and the two measurement paths together. The four variants
//! ablate the transformed error state and the pose-only update
//! independently so their contributions can be separated.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::Config;
use crate::error::VioError;
use crate::io::TrajPoint;
use crate::metrics::nees6;
use crate::po::{
    chi2_gate, ekf_update, po_block, select_base_views, track_poses, FeatureTrack,
};
use crate::propagation::{
    continuous_jacobians, continuous_jacobians_classical, discretize, propagate_covariance,
    propagate_mean, DiscretizationOptions,
};
use crate::geometry::skew;
use crate::sim::SimData;
use crate::state::{
    augment_clone, error_between, estimate_with_error, marginalize_oldest, ErrorConvention,
    ErrorCovariance, ImuState, NavState, IMU_DIM,
};
use crate::triangulation::triangulated_block;

/// Estimator variants for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Transformed error state + pose-only updates.
    Full,
    /// Classical error state + pose-only updates.
    NoSt,
    /// Transformed error state + triangulated landmark updates.
    NoPo,
    /// Classical error state + triangulated landmark updates.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoSt, Variant::NoPo, Variant::Baseline];

    pub fn convention(self) -> ErrorConvention {
        match self {
            Variant::Full | Variant::NoPo => ErrorConvention::Dst,
            Variant::NoSt | Variant::Baseline => ErrorConvention::Classical,
        }
    }

    pub fn uses_po(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSt)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSt => "no-st",
            Variant::NoPo => "no-po",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Variant, VioError> {
        match s {
            "full" => Ok(Variant::Full),
            "no-st" => Ok(Variant::NoSt),
            "no-po" => Ok(Variant::NoPo),
            "baseline" => Ok(Variant::Baseline),
            other => Err(VioError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// One-sigma initial uncertainties, diagonal per axis.
#[derive(Debug, Clone)]
pub struct InitPriors {
    pub sigma_phi: f64,
    pub sigma_v: f64,
    pub sigma_p: f64,
    pub sigma_bg: f64,
    pub sigma_ba: f64,
}

impl Default for InitPriors {
    fn default() -> Self {
        InitPriors {
            sigma_phi: 2e-3,
            sigma_v: 5e-2,
            sigma_p: 1e-3,
            sigma_bg: 3e-3,
            sigma_ba: 3e-2,
        }
    }
}

impl InitPriors {
    pub fn p0(&self) -> ErrorCovariance {
        let mut p = ErrorCovariance::zeros(IMU_DIM);
        let sig = [self.sigma_phi, self.sigma_v, self.sigma_p, self.sigma_bg, self.sigma_ba];
        for (b, s) in sig.iter().enumerate() {
            for i in 0..3 {
                p.m[(3 * b + i, 3 * b + i)] = s * s;
            }
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct FilterParams {
    pub variant: Variant,
    pub priors: InitPriors,
    /// Seed for sampling the initial estimate around the truth; identical
    /// raw draws across variants keep the ablation comparable.
    pub init_seed: u64,
    /// Draw the initial error from the prior (off gives an exact start).
    pub perturb_init: bool,
    /// Fix the initial error magnitude at sqrt(3) sigma per block with a
    /// uniformly random direction instead of a Gaussian draw. The block
    /// covariance still equals the booked prior, but every run is equally
    /// perturbed; used by the robustness ablation study.
    pub init_shell: bool,
    /// Maximum feature updates applied per camera epoch.
    pub budget: usize,
    /// Minimum observations before a track becomes usable.
    pub min_views: usize,
    /// Check covariance eigenvalues every this many camera epochs (0 = off).
    pub psd_stride: usize,
    /// Overrides the dataset's normalized measurement noise when set.
    pub sigma_n_override: Option<f64>,
    /// Sigma scale applied to the pose-only noise model; 1.0 books exactly
    /// the first-order noise covariance (own view plus base views).
    pub po_noise_factor: f64,
    /// Linearization guard for the pose-only path: skip tracks whose base
    /// parallax is below this many bearing sigmas. The first-order noise
    /// booking needs parallax well above the noise level; below it the
    /// reconstruction is noise-dominated and the update can destabilize.
    pub po_parallax_sigmas: f64,
}

impl FilterParams {
    pub fn new(variant: Variant) -> Self {
        FilterParams {
            variant,
            priors: InitPriors::default(),
            init_seed: 1,
            perturb_init: true,
            init_shell: false,
            budget: 6,
            min_views: 3,
            psd_stride: 25,
            sigma_n_override: None,
            po_noise_factor: 1.0,
            po_parallax_sigmas: 5.0,
        }
    }
}

/// Per-camera-epoch filter snapshot kept for downstream consumers
/// (trajectory export, consistency metrics, the deprivation smoother).
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub t: f64,
    pub imu: ImuState,
    /// Inertial 15x15 covariance block at this epoch.
    pub cov15: DMatrix<f64>,
    /// Whether camera updates were suppressed at this epoch.
    pub deprived: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub variant: Variant,
    pub traj: Vec<TrajPoint>,
    pub epochs: Vec<EpochRecord>,
    /// Pose NEES (attitude + position, 6 dof) per camera epoch.
    pub nees_pose: Vec<(f64, f64)>,
    pub gate_pass: usize,
    pub gate_fail: usize,
    /// Tracks dropped for geometric reasons (degenerate, short, behind).
    pub skipped: usize,
    pub max_asymmetry: f64,
    pub min_eigenvalue: f64,
}

impl RunOutput {
    pub fn gate_acceptance(&self) -> f64 {
        let total = self.gate_pass + self.gate_fail;
        if total == 0 {
            return f64::NAN;
        }
        self.gate_pass as f64 / total as f64
    }
}

fn deprived_at(t: f64, intervals: &[(f64, f64)]) -> bool {
    intervals.iter().any(|&(a, b)| t >= a - 1e-9 && t < b - 1e-9)
}

/// Initial covariance in the variant's own error coordinates. The prior is
/// physical (additive position/velocity, left attitude error); under the
/// transformed convention the same prior reads d_ST v = dv - [v x] phi,
/// d_ST p = dp - [p x] phi at first order, so the diagonal picks up
/// attitude-velocity and attitude-position correlations.
fn init_covariance(
    priors: &InitPriors,
    imu: &ImuState,
    convention: ErrorConvention,
) -> ErrorCovariance {
    let mut p = priors.p0();
    if convention == ErrorConvention::Dst {
        let mut t = DMatrix::identity(IMU_DIM, IMU_DIM);
        t.view_mut((3, 0), (3, 3)).copy_from(&(-skew(&imu.v)));
        t.view_mut((6, 0), (3, 3)).copy_from(&(-skew(&imu.p)));
        p = ErrorCovariance::from_matrix(&t * &p.m * t.transpose());
        p.symmetrize();
    }
    p
}

fn sample_error(rng: &mut ChaCha20Rng, priors: &InitPriors, shell: bool) -> DVector<f64> {
    let sig = [priors.sigma_phi, priors.sigma_v, priors.sigma_p, priors.sigma_bg, priors.sigma_ba];
    let mut e = DVector::zeros(IMU_DIM);
    for (b, s) in sig.iter().enumerate() {
        let mut v: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        if shell {
            // Uniform direction at radius sqrt(3) s: E[v vT] = s^2 I, the
            // same second moment as the Gaussian draw.
            v *= 3f64.sqrt() / v.norm();
        }
        for i in 0..3 {
            e[3 * b + i] = s * v[i];
        }
    }
    e
}

struct Engine<'a> {
    data: &'a SimData,
    cfg: &'a Config,
    params: &'a FilterParams,
    convention: ErrorConvention,
    sigma_n: f64,
    state: NavState,
    cov: ErrorCovariance,
    tracks: BTreeMap<u64, FeatureTrack>,
    next_clone_id: u64,
    out: RunOutput,
}

impl<'a> Engine<'a> {
    fn pose_nees(&self, epoch: usize) -> Result<f64, VioError> {
        let s = &self.data.truth[epoch];
        let (_, bg, ba) = self.data.truth_bias[epoch];
        let truth = ImuState { q: s.q, v: s.v, p: s.p, bg, ba };
        let e15 = error_between(&self.state.imu, &truth, self.convention);
        let sel = [0usize, 1, 2, 6, 7, 8];
        let e6 = Vector6::from_fn(|i, _| e15[sel[i]]);
        let p6 = Matrix6::from_fn(|i, j| self.cov.m[(sel[i], sel[j])]);
        nees6(&e6, &p6)
    }

    fn record_epoch(&mut self, epoch: usize, t: f64, deprived: bool) -> Result<(), VioError> {
        self.out.traj.push(TrajPoint { t, p: self.state.imu.p, q: self.state.imu.q });
        self.out.epochs.push(EpochRecord {
            t,
            imu: self.state.imu.clone(),
            cov15: self.cov.m.view((0, 0), (IMU_DIM, IMU_DIM)).into(),
            deprived,
        });
        let nees = self.pose_nees(epoch)?;
        self.out.nees_pose.push((t, nees));
        self.out.max_asymmetry = self.out.max_asymmetry.max(self.cov.max_asymmetry());
        let cam_idx = self.out.epochs.len();
        if self.params.psd_stride > 0 && cam_idx % self.params.psd_stride == 0 {
            self.out.min_eigenvalue = self.out.min_eigenvalue.min(self.cov.min_eigenvalue());
        }
        Ok(())
    }

    /// Applies one track's update: build the residual block for the active
    /// measurement path, gate it, and fold it in.
    fn apply_track(&mut self, track: &FeatureTrack) -> Result<(), VioError> {
        let built = if self.params.variant.uses_po() {
            track_poses(track, &self.state, &self.cfg.sim.ext).and_then(|(poses, _)| {
                let base = select_base_views(track, &poses)?;
                let guard = self.params.po_parallax_sigmas * self.sigma_n;
                if base.degenerate || base.theta < guard {
                    return Err(VioError::DegenerateBaseline { norm: base.theta });
                }
                po_block(
                    track,
                    &base,
                    &self.state,
                    &self.cfg.sim.ext,
                    self.sigma_n * self.params.po_noise_factor,
                    self.convention,
                )
            })
        } else {
            track_poses(track, &self.state, &self.cfg.sim.ext).and_then(|(poses, window)| {
                let layout = self.state.layout();
                let body: Vec<Vector3<f64>> =
                    window.iter().map(|&i| self.state.clones[i].p).collect();
                triangulated_block(
                    track,
                    &poses,
                    &window,
                    layout.dim(),
                    |i| layout.clone_phi(i).start,
                    |i| layout.clone_pos(i).start,
                    &body,
                    self.sigma_n,
                    self.convention,
                )
            })
        };
        let block = match built {
            Ok(b) => b,
            Err(
                VioError::DegenerateBaseline { .. }
                | VioError::NegativeDepth { .. }
                | VioError::TooFewObservations { .. },
            ) => {
                self.out.skipped += 1;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        if chi2_gate(&block.r, &block.h, &self.cov, &block.r_meas)? {
            let (ns, np) = ekf_update(&self.state, &self.cov, &block, self.convention)?;
            self.state = ns;
            self.cov = np;
            self.out.gate_pass += 1;
        } else {
            self.out.gate_fail += 1;
        }
        Ok(())
    }

    fn process_frame(&mut self, t: f64, obs: &[(u64, nalgebra::Vector2<f64>)]) -> Result<(), VioError> {
        let clone_id = self.next_clone_id;
        self.next_clone_id += 1;
        let (ns, np) = augment_clone(&self.state, &self.cov, t, clone_id)?;
        self.state = ns;
        self.cov = np;

        let mut current: HashSet<u64> = HashSet::new();
        for (fid, xy) in obs {
            current.insert(*fid);
            self.tracks
                .entry(*fid)
                .or_insert_with(|| FeatureTrack { feature_id: *fid, observations: Vec::new() })
                .observations
                .push((clone_id, Vector3::new(xy.x, xy.y, 1.0)));
        }

        // Tracks that just ended must be used now or discarded.
        let dead: Vec<u64> =
            self.tracks.keys().copied().filter(|id| !current.contains(id)).collect();
        let mut queue: Vec<u64> = Vec::new();
        // Longest tracks first; ties rotate with the clone counter so
        // long-lived features (distant points) share the budget instead of
        // a fixed id order starving the rest.
        let by_len_desc = |ids: &mut Vec<u64>, tracks: &BTreeMap<u64, FeatureTrack>| {
            ids.sort_by_key(|id| {
                (usize::MAX - tracks[id].observations.len(), id.wrapping_add(clone_id) % 997, *id)
            });
        };
        let mut dead_usable: Vec<u64> = dead
            .iter()
            .copied()
            .filter(|id| self.tracks[id].observations.len() >= self.params.min_views)
            .collect();
        by_len_desc(&mut dead_usable, &self.tracks);
        for id in dead_usable {
            if queue.len() < 2 * self.params.budget {
                queue.push(id);
            } else {
                self.out.skipped += 1;
            }
        }

        // Window overflow: consume the longest tracks pinned to the clone
        // about to leave; the rest just lose that observation.
        let overflow = self.state.clones.len() > self.cfg.max_clones;
        if overflow {
            let oldest = self.state.clones[0].clone_id;
            let mut pressure: Vec<u64> = self
                .tracks
                .iter()
                .filter(|(id, tr)| {
                    current.contains(id)
                        && tr.observations.first().map(|o| o.0) == Some(oldest)
                        && tr.observations.len() >= self.params.min_views
                })
                .map(|(id, _)| *id)
                .collect();
            by_len_desc(&mut pressure, &self.tracks);
            for id in pressure {
                if queue.len() < self.params.budget {
                    queue.push(id);
                }
            }
        }

        for id in &queue {
            let track = self.tracks[id].clone();
            self.apply_track(&track)?;
        }
        for id in dead {
            self.tracks.remove(&id);
        }
        for id in &queue {
            self.tracks.remove(id);
        }

        if overflow {
            let oldest = self.state.clones[0].clone_id;
            self.tracks.retain(|_, tr| {
                tr.observations.retain(|(cid, _)| *cid != oldest);
                !tr.observations.is_empty()
            });
            let (ns, np) = marginalize_oldest(&self.state, &self.cov)?;
            self.state = ns;
            self.cov = np;
        }
        Ok(())
    }
}

/// Runs one filter variant over a simulated dataset. Camera epochs produce
/// trajectory points and consistency records; IMU samples in between drive
/// mean and covariance propagation under the variant's error convention.
pub fn run_filter(
    data: &SimData,
    cfg: &Config,
    params: &FilterParams,
) -> Result<RunOutput, VioError> {
    let convention = params.variant.convention();
    let truth0 = data.truth_at_start();
    let e0 = if params.perturb_init {
        let mut rng = ChaCha20Rng::seed_from_u64(params.init_seed);
        sample_error(&mut rng, &params.priors, params.init_shell)
    } else {
        DVector::zeros(IMU_DIM)
    };
    // The perturbation is physical (classical coordinates) for every
    // variant, so all four start from the identical state; each filter
    // books that prior in its own error coordinates.
    let imu0 = estimate_with_error(&truth0, &e0, ErrorConvention::Classical);

    let sigma_n = params.sigma_n_override.unwrap_or(data.sigma_n);
    if sigma_n <= 0.0 {
        return Err(VioError::Config("measurement noise must be positive".into()));
    }

    let mut engine = Engine {
        data,
        cfg,
        params,
        convention,
        sigma_n,
        state: NavState::new(imu0.clone()),
        cov: init_covariance(&params.priors, &imu0, convention),
        tracks: BTreeMap::new(),
        next_clone_id: 0,
        out: RunOutput {
            variant: params.variant,
            traj: Vec::new(),
            epochs: Vec::new(),
            nees_pose: Vec::new(),
            gate_pass: 0,
            gate_fail: 0,
            skipped: 0,
            max_asymmetry: 0.0,
            min_eigenvalue: f64::INFINITY,
        },
    };

    let stride = (cfg.sim.imu_rate_hz / cfg.sim.cam_rate_hz).round() as usize;
    let n = data.imu.len();
    let opts = DiscretizationOptions::default();
    let mut frame_ptr = 0usize;
    let mut was_deprived = false;

    for k in 0..=n {
        let t = data.truth[k].t;
        let cam_epoch = k % stride == 0;
        if cam_epoch {
            let deprived = deprived_at(t, &cfg.deprivation);
            if deprived && !was_deprived {
                engine.tracks.clear();
            }
            was_deprived = deprived;
            let has_frame = frame_ptr < data.frames.len()
                && (data.frames[frame_ptr].t - t).abs() < 1e-9;
            if has_frame {
                if !deprived {
                    let obs = data.frames[frame_ptr].obs.clone();
                    engine.process_frame(t, &obs)?;
                }
                frame_ptr += 1;
            }
            engine.record_epoch(k, t, deprived)?;
        }
        if k < n {
            let sample = &data.imu[k];
            let dt = data.truth[k + 1].t - t;
            let (f, g) = match convention {
                ErrorConvention::Dst => continuous_jacobians(&engine.state.imu, &cfg.sim.world),
                ErrorConvention::Classical => {
                    let accel_hat = sample.accel - engine.state.imu.ba;
                    continuous_jacobians_classical(&engine.state.imu, &accel_hat, &cfg.sim.world)
                }
            };
            let bundle = discretize(&f, &g, &cfg.sim.noise, dt, opts)?;
            engine.state.imu = propagate_mean(&engine.state.imu, sample, &cfg.sim.world, dt);
            propagate_covariance(&mut engine.cov, &bundle)?;
        }
    }

    let mut out = engine.out;
    if params.psd_stride > 0 {
        out.min_eigenvalue = out.min_eigenvalue.min(engine.cov.min_eigenvalue());
    }
    if out.min_eigenvalue == f64::INFINITY {
        out.min_eigenvalue = f64::NAN;
    }
    Ok(out)
}
