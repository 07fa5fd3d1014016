//! Velocity/attitude/battery measurement streams: replayed from `api.csv` or
//! synthesized from ground truth with declared noise, bias and battery drain.

use std::path::Path;

use edgeslam_core::ekf::ApiMeasurement;
use edgeslam_core::rotation_to_euler;
use edgeslam_core::Pose;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `api.csv` row; velocity in the camera frame (m/s), ZYX Euler angles of
/// the camera in the first camera frame (rad), battery level in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Row {
    timestamp: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    roll: f64,
    pitch: f64,
    yaw: f64,
    battery: f64,
}

impl From<Row> for ApiMeasurement {
    fn from(r: Row) -> Self {
        ApiMeasurement {
            timestamp: r.timestamp,
            velocity_body: Vector3::new(r.vx, r.vy, r.vz),
            euler: Vector3::new(r.roll, r.pitch, r.yaw),
            battery: r.battery,
        }
    }
}

impl From<&ApiMeasurement> for Row {
    fn from(m: &ApiMeasurement) -> Self {
        Row {
            timestamp: m.timestamp,
            vx: m.velocity_body.x,
            vy: m.velocity_body.y,
            vz: m.velocity_body.z,
            roll: m.euler.x,
            pitch: m.euler.y,
            yaw: m.euler.z,
            battery: m.battery,
        }
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<ApiMeasurement>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::dataset_io(path, e))?;
    let mut out: Vec<ApiMeasurement> = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        // Row 1 is the header.
        let line = i + 2;
        let m: ApiMeasurement = row
            .map_err(|e| Error::Dataset(format!("{}:{line}: {e}", path.display())))?
            .into();
        let finite = m.velocity_body.iter().chain(m.euler.iter()).all(|v| v.is_finite());
        if !finite || !(0.0..=1.0).contains(&m.battery) {
            return Err(Error::Dataset(format!(
                "{}:{line}: non-finite value or battery outside [0, 1]",
                path.display()
            )));
        }
        if out.last().is_some_and(|p| m.timestamp <= p.timestamp) {
            return Err(Error::Dataset(format!(
                "{}:{line}: timestamps must increase",
                path.display()
            )));
        }
        out.push(m);
    }
    Ok(out)
}

pub fn write_csv(path: &Path, stream: &[ApiMeasurement]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    for m in stream {
        w.serialize(Row::from(m))
            .map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pose at `t` by linear translation and spherical rotation interpolation;
/// `None` outside the sampled interval.
pub fn interpolate(samples: &[(f64, Pose)], t: f64) -> Option<Pose> {
    let i = samples.partition_point(|s| s.0 < t);
    if i == samples.len() {
        return None;
    }
    let (t1, p1) = &samples[i];
    if *t1 == t {
        return Some(*p1);
    }
    let (t0, p0) = samples.get(i.checked_sub(1)?)?;
    let a = (t - t0) / (t1 - t0);
    let q = p0.quaternion().slerp(&p1.quaternion(), a);
    let tr = p0.translation * (1.0 - a) + p1.translation * a;
    Some(Pose::from_quaternion(&q, tr))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApiNoise {
    /// Per-axis white velocity noise, m/s.
    pub velocity_noise: f64,
    /// Per-angle white attitude noise, rad.
    pub angle_noise: f64,
    /// Camera-x velocity bias at full battery, m/s; it doubles at empty.
    pub velocity_bias: f64,
    /// Battery drained per second.
    pub battery_decay: f64,
    pub seed: u64,
}

impl ApiNoise {
    pub const NONE: ApiNoise = ApiNoise {
        velocity_noise: 0.0,
        angle_noise: 0.0,
        velocity_bias: 0.0,
        battery_decay: 0.0,
        seed: 0,
    };
}

/// One measurement per entry of `times` after the first with ground truth:
/// the mean camera-frame velocity since the previous measurement and the
/// attitude, both relative to the camera pose at the first such time.
pub fn synthesize(gt: &[(f64, Pose)], times: &[f64], noise: &ApiNoise) -> Vec<ApiMeasurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let vel = Normal::new(0.0, noise.velocity_noise).expect("non-negative sigma");
    let ang = Normal::new(0.0, noise.angle_noise).expect("non-negative sigma");
    let mut out = Vec::new();
    let mut origin: Option<(f64, Pose)> = None;
    let mut prev: Option<(f64, Pose)> = None;
    for &t in times {
        let Some(world) = interpolate(gt, t) else {
            continue;
        };
        let (t0, base) = *origin.get_or_insert((t, world));
        let pose = base.inverse().compose(&world);
        if let Some((tp, pp)) = prev {
            let dt = t - tp;
            let battery = (1.0 - noise.battery_decay * (t - t0)).clamp(0.0, 1.0);
            let mut v = pp.rotation.transpose() * (pose.translation - pp.translation) / dt;
            v.x += noise.velocity_bias * (2.0 - battery);
            v += Vector3::from_fn(|_, _| vel.sample(&mut rng));
            let euler = rotation_to_euler(&pose.rotation) + Vector3::from_fn(|_, _| ang.sample(&mut rng));
            out.push(ApiMeasurement {
                timestamp: t,
                velocity_body: v,
                euler,
                battery,
            });
        }
        prev = Some((t, pose));
    }
    out
}
