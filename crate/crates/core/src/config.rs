//! Flat `key = value` configuration for the simulation and estimator
//! front ends. Unknown or duplicate keys are rejected so typos fail loudly.

use std::collections::HashSet;
use std::path::Path;

use crate::error::VioError;
use crate::filter::InitPriors;
use crate::sim::{SimWorld, TrajectoryKind};

/// Parsed run configuration. `sim` carries everything the generator needs;
/// the remaining fields steer the estimator and the study drivers.
#[derive(Debug, Clone)]
pub struct Config {
    pub sim: SimWorld,
    /// Sliding-window size (number of pose clones kept by the filter).
    pub max_clones: usize,
    /// Visual deprivation intervals in seconds, `start..end` each.
    pub deprivation: Vec<(f64, f64)>,
    /// Number of Monte Carlo seeds for multi-run studies.
    pub mc_seeds: usize,
    /// Initial estimate error scales, shared by every variant in a study.
    pub priors: InitPriors,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            sim: SimWorld::default(),
            max_clones: 11,
            deprivation: Vec::new(),
            mc_seeds: 20,
            priors: InitPriors::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, VioError> {
    v.parse::<T>()
        .map_err(|_| VioError::Config(format!("bad value for {key}: {v:?}")))
}

fn parse_intervals(v: &str) -> Result<Vec<(f64, f64)>, VioError> {
    let mut out = Vec::new();
    for part in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (a, b) = part
            .split_once("..")
            .ok_or_else(|| VioError::Config(format!("bad interval {part:?}, want start..end")))?;
        let start: f64 = parse_num("deprivation.intervals", a.trim())?;
        let end: f64 = parse_num("deprivation.intervals", b.trim())?;
        if !(start < end) {
            return Err(VioError::Config(format!("empty interval {part:?}")));
        }
        if let Some(&(_, prev_end)) = out.last() {
            if start <= prev_end {
                return Err(VioError::Config(format!(
                    "interval {part:?}: intervals must be sorted and disjoint"
                )));
            }
        }
        out.push((start, end));
    }
    Ok(out)
}

/// Parses configuration text. Lines are `key = value`; blank lines and
/// `#` comments are ignored. Keys not listed below are errors.
pub fn parse_config(text: &str) -> Result<Config, VioError> {
    let mut cfg = Config::default();
    let mut seen = HashSet::new();
    // Trajectory shape parameters are gathered first and folded into the
    // kind at the end, so key order in the file does not matter.
    let mut kind_name: Option<String> = None;
    let mut speed: Option<f64> = None;
    let mut radius: Option<f64> = None;
    let mut rate: Option<f64> = None;
    let mut sweep_deg: Option<f64> = None;
    let mut period_s: Option<f64> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| VioError::Config(format!("line {}: missing '='", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(VioError::Config(format!("duplicate key {key:?}")));
        }
        match key {
            "trajectory.kind" => kind_name = Some(value.to_string()),
            "trajectory.duration_s" => cfg.sim.duration_s = parse_num(key, value)?,
            "trajectory.speed" => speed = Some(parse_num(key, value)?),
            "trajectory.radius" => radius = Some(parse_num(key, value)?),
            "trajectory.rate" => rate = Some(parse_num(key, value)?),
            "trajectory.sweep_deg" => sweep_deg = Some(parse_num(key, value)?),
            "trajectory.period_s" => period_s = Some(parse_num(key, value)?),
            "imu.rate_hz" => cfg.sim.imu_rate_hz = parse_num(key, value)?,
            "cam.rate_hz" => cfg.sim.cam_rate_hz = parse_num(key, value)?,
            "cam.focal_px" => cfg.sim.focal_px = parse_num(key, value)?,
            "cam.fov_deg" => cfg.sim.fov_deg = parse_num(key, value)?,
            "landmarks.count" => cfg.sim.n_landmarks = parse_num(key, value)?,
            "landmarks.margin" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(VioError::Config(format!(
                        "landmarks.margin wants x,y,z, got {value:?}"
                    )));
                }
                cfg.sim.landmark_margin = nalgebra::Vector3::new(
                    parse_num(key, parts[0])?,
                    parse_num(key, parts[1])?,
                    parse_num(key, parts[2])?,
                );
            }
            "landmarks.far_count" => cfg.sim.far_landmarks = parse_num(key, value)?,
            "landmarks.far_radius" => cfg.sim.far_radius = parse_num(key, value)?,
            "landmarks.max_depth" => cfg.sim.max_depth = parse_num(key, value)?,
            "init.sigma_phi" => cfg.priors.sigma_phi = parse_num(key, value)?,
            "init.sigma_v" => cfg.priors.sigma_v = parse_num(key, value)?,
            "init.sigma_p" => cfg.priors.sigma_p = parse_num(key, value)?,
            "init.sigma_bg" => cfg.priors.sigma_bg = parse_num(key, value)?,
            "init.sigma_ba" => cfg.priors.sigma_ba = parse_num(key, value)?,
            "noise.sigma_g" => cfg.sim.noise.sigma_g = parse_num(key, value)?,
            "noise.sigma_a" => cfg.sim.noise.sigma_a = parse_num(key, value)?,
            "noise.sigma_bg" => cfg.sim.noise.sigma_bg = parse_num(key, value)?,
            "noise.sigma_ba" => cfg.sim.noise.sigma_ba = parse_num(key, value)?,
            "noise.sigma_px" => cfg.sim.sigma_px = parse_num(key, value)?,
            "window.max_clones" => {
                cfg.max_clones = parse_num(key, value)?;
                if cfg.max_clones < 3 {
                    return Err(VioError::Config("window.max_clones must be >= 3".into()));
                }
            }
            "earth_rotation" => {
                let on: bool = parse_num(key, value)?;
                cfg.sim.world = if on {
                    crate::propagation::WorldParams::with_earth_rotation(45f64.to_radians())
                } else {
                    crate::propagation::WorldParams::default()
                };
            }
            "deprivation.intervals" => cfg.deprivation = parse_intervals(value)?,
            "seed" => cfg.sim.seed = parse_num(key, value)?,
            "mc.seeds" => cfg.mc_seeds = parse_num(key, value)?,
            _ => return Err(VioError::Config(format!("unknown key {key:?}"))),
        }
    }

    if let Some(name) = kind_name {
        cfg.sim.kind = match name.as_str() {
            "static" => TrajectoryKind::Static,
            "line" => TrajectoryKind::Line { speed: speed.unwrap_or(1.0) },
            "circle" => TrajectoryKind::Circle {
                radius: radius.unwrap_or(5.0),
                rate: rate.unwrap_or(0.25),
            },
            "random-walk" => TrajectoryKind::RandomWalk,
            "scan" => TrajectoryKind::Scan {
                sweep_deg: sweep_deg.unwrap_or(120.0),
                period_s: period_s.unwrap_or(8.0),
            },
            other => return Err(VioError::Config(format!("unknown trajectory.kind {other:?}"))),
        };
    } else if speed.is_some() || radius.is_some() || rate.is_some() || sweep_deg.is_some()
        || period_s.is_some()
    {
        return Err(VioError::Config(
            "trajectory shape parameters require trajectory.kind".into(),
        ));
    }

    for &(start, end) in &cfg.deprivation {
        if end > cfg.sim.duration_s {
            return Err(VioError::Config(format!(
                "deprivation interval {start}..{end} exceeds duration {}",
                cfg.sim.duration_s
            )));
        }
    }
    if cfg.sim.imu_rate_hz <= 0.0 || cfg.sim.cam_rate_hz <= 0.0 {
        return Err(VioError::Config("rates must be positive".into()));
    }
    let ratio = cfg.sim.imu_rate_hz / cfg.sim.cam_rate_hz;
    if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
        return Err(VioError::Config(format!(
            "imu.rate_hz must be an integer multiple of cam.rate_hz (ratio {ratio})"
        )));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config, VioError> {
    parse_config(&std::fs::read_to_string(path)?)
}
