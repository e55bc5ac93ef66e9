//! Dataset file formats: IMU and feature CSV streams, and TUM-style
//! trajectory text. All floats are written in shortest round-trip form, so
//! write-then-read is lossless.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2, Vector3};

use crate::error::VioError;
use crate::propagation::ImuSample;
use crate::sim::CamFrame;

/// One trajectory pose in TUM convention (translation + unit quaternion).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajPoint {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
}

fn parse_f64(s: &str, what: &str) -> Result<f64, VioError> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| VioError::Parse(format!("bad {what}: {s:?}")))
}

/// Writes `t,gx,gy,gz,ax,ay,az` rows.
pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<(), VioError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "gx", "gy", "gz", "ax", "ay", "az"])
        .map_err(|e| VioError::Parse(e.to_string()))?;
    for s in samples {
        w.write_record([
            s.timestamp.to_string(),
            s.gyro.x.to_string(),
            s.gyro.y.to_string(),
            s.gyro.z.to_string(),
            s.accel.x.to_string(),
            s.accel.y.to_string(),
            s.accel.z.to_string(),
        ])
        .map_err(|e| VioError::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, VioError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers().map_err(|e| VioError::Parse(e.to_string()))?.clone();
    let expect = ["t", "gx", "gy", "gz", "ax", "ay", "az"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(VioError::Parse(format!("imu.csv header mismatch: {headers:?}")));
    }
    let mut out = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for rec in r.records() {
        let rec = rec.map_err(|e| VioError::Parse(e.to_string()))?;
        if rec.len() != 7 {
            return Err(VioError::Parse(format!("imu.csv row width {}", rec.len())));
        }
        let t = parse_f64(&rec[0], "timestamp")?;
        if t <= last_t {
            return Err(VioError::NonMonotoneTime(t));
        }
        last_t = t;
        out.push(ImuSample {
            timestamp: t,
            gyro: Vector3::new(
                parse_f64(&rec[1], "gx")?,
                parse_f64(&rec[2], "gy")?,
                parse_f64(&rec[3], "gz")?,
            ),
            accel: Vector3::new(
                parse_f64(&rec[4], "ax")?,
                parse_f64(&rec[5], "ay")?,
                parse_f64(&rec[6], "az")?,
            ),
        });
    }
    Ok(out)
}

/// Writes `t,feature_id,x_norm,y_norm` rows, one per observation.
pub fn write_features_csv(path: &Path, frames: &[CamFrame]) -> Result<(), VioError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "feature_id", "x_norm", "y_norm"])
        .map_err(|e| VioError::Parse(e.to_string()))?;
    for f in frames {
        for (fid, xy) in &f.obs {
            w.write_record([
                f.t.to_string(),
                fid.to_string(),
                xy.x.to_string(),
                xy.y.to_string(),
            ])
            .map_err(|e| VioError::Parse(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Groups rows back into frames by exact timestamp runs. Frames with no
/// visible features are not representable in the CSV and are recreated by
/// the consumer from the camera cadence if needed.
pub fn read_features_csv(path: &Path) -> Result<Vec<CamFrame>, VioError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers().map_err(|e| VioError::Parse(e.to_string()))?.clone();
    let expect = ["t", "feature_id", "x_norm", "y_norm"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(VioError::Parse(format!("features.csv header mismatch: {headers:?}")));
    }
    let mut frames: Vec<CamFrame> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| VioError::Parse(e.to_string()))?;
        if rec.len() != 4 {
            return Err(VioError::Parse(format!("features.csv row width {}", rec.len())));
        }
        let t = parse_f64(&rec[0], "timestamp")?;
        let fid = rec[1]
            .trim()
            .parse::<u64>()
            .map_err(|_| VioError::Parse(format!("bad feature_id {:?}", &rec[1])))?;
        let xy = Vector2::new(parse_f64(&rec[2], "x_norm")?, parse_f64(&rec[3], "y_norm")?);
        match frames.last_mut() {
            Some(f) if f.t == t => f.obs.push((fid, xy)),
            Some(f) if t < f.t => return Err(VioError::NonMonotoneTime(t)),
            _ => frames.push(CamFrame { t, obs: vec![(fid, xy)] }),
        }
    }
    Ok(frames)
}

/// Writes space-separated `t x y z qx qy qz qw` lines.
pub fn write_tum(path: &Path, traj: &[TrajPoint]) -> Result<(), VioError> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for pt in traj {
        let q = pt.q.quaternion();
        writeln!(
            f,
            "{} {} {} {} {} {} {} {}",
            pt.t, pt.p.x, pt.p.y, pt.p.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

pub fn read_tum(path: &Path) -> Result<Vec<TrajPoint>, VioError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 8 {
            return Err(VioError::Parse(format!(
                "trajectory line {} has {} fields",
                lineno + 1,
                parts.len()
            )));
        }
        let vals: Result<Vec<f64>, _> = parts.iter().map(|s| parse_f64(s, "trajectory field")).collect();
        let v = vals?;
        if v[0] <= last_t {
            return Err(VioError::NonMonotoneTime(v[0]));
        }
        last_t = v[0];
        let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(VioError::Parse(format!(
                "non-unit quaternion on line {} (norm {})",
                lineno + 1,
                q.norm()
            )));
        }
        // new_unchecked keeps the stored bits, so write/read round-trips.
        out.push(TrajPoint {
            t: v[0],
            p: Vector3::new(v[1], v[2], v[3]),
            q: UnitQuaternion::new_unchecked(q),
        });
    }
    Ok(out)
}
