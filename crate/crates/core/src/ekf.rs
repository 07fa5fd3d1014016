//! Six-state extended Kalman filter fusing drifting API velocity/attitude with
//! sparse, scale-free visual odometry.
//!
//! State `[x y z φ θ ψ]`: world position and ZYX Euler angles of the body
//! (camera) frame. Prediction integrates body-frame velocity; updates come from
//! API attitude and from the accumulated visual pose.

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};

use crate::geometry::{euler_to_rotation, rot_x, rot_y, rot_z, rotation_to_euler, skew, wrap_angle, Pose};

/// Displacements shorter than this are treated as no motion by [`resolve_scale`].
pub const LOW_MOTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum EkfError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("time since last visual update must be non-negative, got {0}")]
    NegativeTau(f64),
    #[error("battery level {0} outside [0, 1]")]
    InvalidBattery(f64),
    #[error("innovation component {index} = {value} exceeds gate {gate}")]
    Gate { index: usize, value: f64, gate: f64 },
    #[error("innovation covariance is singular")]
    Singular,
    #[error("non-finite value in measurement or state")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub position: Vector3<f64>,
    pub euler: Vector3<f64>,
    pub covariance: Matrix6<f64>,
}

impl EkfState {
    pub fn new(position: Vector3<f64>, euler: Vector3<f64>, covariance: Matrix6<f64>) -> Self {
        Self {
            position,
            euler: euler.map(wrap_angle),
            covariance,
        }
    }

    pub fn from_pose(pose: &Pose, covariance: Matrix6<f64>) -> Self {
        Self::new(pose.translation, rotation_to_euler(&pose.rotation), covariance)
    }

    pub fn vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.position.x,
            self.position.y,
            self.position.z,
            self.euler.x,
            self.euler.y,
            self.euler.z,
        )
    }

    /// Body-to-world pose.
    pub fn pose(&self) -> Pose {
        Pose::from_parts(
            euler_to_rotation(self.euler.x, self.euler.y, self.euler.z),
            self.position,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApiMeasurement {
    pub timestamp: f64,
    pub velocity_body: Vector3<f64>,
    pub euler: Vector3<f64>,
    pub battery: f64,
}

/// Accumulated visual pose `X_k` (body-to-world).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoMeasurement {
    pub timestamp: f64,
    pub pose: Pose,
}

impl VoMeasurement {
    pub fn euler(&self) -> Vector3<f64> {
        rotation_to_euler(&self.pose.rotation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub beta: f64,
    pub lambda: f64,
    pub r_api: Matrix3<f64>,
    pub r_vo: Matrix6<f64>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        let mut r_vo = Matrix6::zeros();
        for i in 0..3 {
            r_vo[(i, i)] = 0.05 * 0.05;
            r_vo[(i + 3, i + 3)] = 0.02 * 0.02;
        }
        Self {
            beta: 1e-4,
            lambda: 0.1,
            r_api: Matrix3::identity() * (0.02 * 0.02),
            r_vo,
        }
    }
}

impl NoiseModel {
    /// `Q_k = β(1 − b + λτ)·I₆`.
    pub fn process_noise(&self, battery: f64, tau: f64) -> Matrix6<f64> {
        Matrix6::identity() * (self.beta * (1.0 - battery + self.lambda * tau))
    }
}

/// Innovation gates; a measurement whose wrapped innovation exceeds a gate in
/// any component is rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gates {
    pub angle: f64,
    pub position: f64,
}

impl Default for Gates {
    fn default() -> Self {
        Self {
            angle: 0.5,
            position: 1.0,
        }
    }
}

/// `∂(R(α)·v)/∂α` for ZYX Euler angles.
pub fn rotation_velocity_jacobian(euler: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let (rx, ry, rz) = (rot_x(euler.x), rot_y(euler.y), rot_z(euler.z));
    let ex = skew(&Vector3::x());
    let ey = skew(&Vector3::y());
    let ez = skew(&Vector3::z());
    let d_roll = rz * ry * rx * ex * v;
    let d_pitch = rz * ry * ey * rx * v;
    let d_yaw = rz * ez * ry * rx * v;
    Matrix3::from_columns(&[d_roll, d_pitch, d_yaw])
}

fn symmetrize(p: &Matrix6<f64>) -> Matrix6<f64> {
    (p + p.transpose()) * 0.5
}

pub fn predict(s: &EkfState, m: &ApiMeasurement, dt: f64, tau: f64, n: &NoiseModel) -> Result<EkfState, EkfError> {
    if !(dt > 0.0) {
        return Err(EkfError::NonPositiveDt(dt));
    }
    if !(tau >= 0.0) {
        return Err(EkfError::NegativeTau(tau));
    }
    if !(0.0..=1.0).contains(&m.battery) {
        return Err(EkfError::InvalidBattery(m.battery));
    }
    if !m.velocity_body.iter().all(|v| v.is_finite()) {
        return Err(EkfError::NonFinite);
    }
    let r = euler_to_rotation(s.euler.x, s.euler.y, s.euler.z);
    let position = s.position + r * m.velocity_body * dt;
    let mut f = Matrix6::identity();
    f.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(rotation_velocity_jacobian(&s.euler, &m.velocity_body) * dt));
    let covariance = symmetrize(&(f * s.covariance * f.transpose() + n.process_noise(m.battery, tau)));
    Ok(EkfState {
        position,
        euler: s.euler,
        covariance,
    })
}

/// Generic linear-measurement update in Joseph form. `innovation` is already
/// wrapped where needed.
fn joseph_update<const M: usize>(
    s: &EkfState,
    h: &SMatrix<f64, M, 6>,
    innovation: &SMatrix<f64, M, 1>,
    r: &SMatrix<f64, M, M>,
) -> Result<EkfState, EkfError> {
    let p = &s.covariance;
    let sm = h * p * h.transpose() + r;
    let s_inv = sm.try_inverse().ok_or(EkfError::Singular)?;
    let k = p * h.transpose() * s_inv;
    let dx = k * innovation;
    let ikh = Matrix6::identity() - k * h;
    let covariance = symmetrize(&(ikh * p * ikh.transpose() + k * r * k.transpose()));
    let position = s.position + dx.fixed_rows::<3>(0);
    let euler = (s.euler + dx.fixed_rows::<3>(3)).map(wrap_angle);
    if !(position.iter().chain(euler.iter()).all(|v| v.is_finite())) {
        return Err(EkfError::NonFinite);
    }
    Ok(EkfState {
        position,
        euler,
        covariance,
    })
}

/// Attitude update with `H = [0₃ₓ₃ I₃]`.
pub fn update_api_angles(
    s: &EkfState,
    z: &Vector3<f64>,
    r_api: &Matrix3<f64>,
    gate: f64,
) -> Result<EkfState, EkfError> {
    let innovation = (z - s.euler).map(wrap_angle);
    if let Some(i) = (0..3).find(|&i| innovation[i].abs() > gate) {
        return Err(EkfError::Gate {
            index: i + 3,
            value: innovation[i],
            gate,
        });
    }
    let mut h = SMatrix::<f64, 3, 6>::zeros();
    h.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    joseph_update(s, &h, &innovation, r_api)
}

/// Full-state update with `H = I₆` from the accumulated visual pose.
pub fn update_vo(s: &EkfState, v: &VoMeasurement, r_vo: &Matrix6<f64>, gates: &Gates) -> Result<EkfState, EkfError> {
    let dp = v.pose.translation - s.position;
    let da = (v.euler() - s.euler).map(wrap_angle);
    if let Some(i) = (0..3).find(|&i| dp[i].abs() > gates.position) {
        return Err(EkfError::Gate {
            index: i,
            value: dp[i],
            gate: gates.position,
        });
    }
    if let Some(i) = (0..3).find(|&i| da[i].abs() > gates.angle) {
        return Err(EkfError::Gate {
            index: i + 3,
            value: da[i],
            gate: gates.angle,
        });
    }
    let innovation = Vector6::new(dp.x, dp.y, dp.z, da.x, da.y, da.z);
    joseph_update(s, &Matrix6::identity(), &innovation, r_vo)
}

/// Scales a unit VO translation by the predicted metric displacement. The
/// flag is set (and zero returned) when the displacement is below 1 mm.
pub fn resolve_scale(delta_t_vo: &Vector3<f64>, predicted_displacement: &Vector3<f64>) -> (Vector3<f64>, bool) {
    let m = predicted_displacement.norm();
    if m < LOW_MOTION {
        (Vector3::zeros(), true)
    } else {
        (delta_t_vo * m, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoOutcome {
    pub outcome: Outcome,
    pub low_motion: bool,
    /// The accumulated visual pose fed to the filter.
    pub measurement: Pose,
}

/// Stateful wrapper driving the filter from time-ordered measurements.
///
/// Keeps `τ` (time since the last accepted visual update) and the visual pose
/// chain `X_k = X_{k−1}·ΔT`, which grows from the last accepted visual update.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub state: EkfState,
    pub noise: NoiseModel,
    pub gates: Gates,
    time: f64,
    last_vo_time: f64,
    vo_pose: Pose,
    vo_anchor_position: Vector3<f64>,
    rejected_api: usize,
    rejected_vo: usize,
}

impl Fusion {
    pub fn new(initial: EkfState, t0: f64, noise: NoiseModel, gates: Gates) -> Self {
        let pose = initial.pose();
        Self {
            vo_anchor_position: initial.position,
            state: initial,
            noise,
            gates,
            time: t0,
            last_vo_time: t0,
            vo_pose: pose,
            rejected_api: 0,
            rejected_vo: 0,
        }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn tau(&self) -> f64 {
        self.time - self.last_vo_time
    }

    pub fn rejected(&self) -> (usize, usize) {
        (self.rejected_api, self.rejected_vo)
    }

    /// Visual pose chain at the last accepted visual update.
    pub fn vo_pose(&self) -> &Pose {
        &self.vo_pose
    }

    /// Predict to `m.timestamp`, then correct attitude. A gated attitude
    /// measurement leaves the predicted state in place.
    pub fn api(&mut self, m: &ApiMeasurement) -> Result<Outcome, EkfError> {
        let dt = m.timestamp - self.time;
        let tau = m.timestamp - self.last_vo_time;
        self.state = predict(&self.state, m, dt, tau, &self.noise)?;
        self.time = m.timestamp;
        match update_api_angles(&self.state, &m.euler, &self.noise.r_api, self.gates.angle) {
            Ok(s) => {
                self.state = s;
                Ok(Outcome::Accepted)
            }
            Err(EkfError::Gate { .. }) => {
                self.rejected_api += 1;
                Ok(Outcome::Rejected)
            }
            Err(e) => Err(e),
        }
    }

    /// Filter displacement since the last accepted visual update.
    pub fn predicted_displacement(&self) -> Vector3<f64> {
        self.state.position - self.vo_anchor_position
    }

    /// Visual update from the relative motion `rel` (maps the frame of the
    /// last accepted visual update into the current one; unit translation).
    pub fn vo_relative(&mut self, rel: &Pose, timestamp: f64) -> Result<VoOutcome, EkfError> {
        let rel_inv = rel.inverse();
        // Camera displacement expressed in the anchor frame is −Rᵀt.
        let (scaled, low_motion) = resolve_scale(&rel_inv.translation.normalize(), &self.predicted_displacement());
        let step = if rel_inv.translation.norm() > 0.0 {
            Pose::from_parts(rel_inv.rotation, scaled)
        } else {
            Pose::from_parts(rel_inv.rotation, Vector3::zeros())
        };
        let measurement = self.vo_pose.compose(&step);
        self.vo_absolute(&measurement, timestamp, low_motion)
    }

    /// Restarts the visual chain at the current estimate, e.g. after tracking
    /// is lost, without applying a measurement.
    pub fn rebase(&mut self) {
        self.vo_pose = self.state.pose();
        self.vo_anchor_position = self.state.position;
    }

    /// Visual update from an already accumulated pose.
    pub fn vo_absolute(&mut self, pose: &Pose, timestamp: f64, low_motion: bool) -> Result<VoOutcome, EkfError> {
        let v = VoMeasurement { timestamp, pose: *pose };
        match update_vo(&self.state, &v, &self.noise.r_vo, &self.gates) {
            Ok(s) => {
                self.state = s;
                self.vo_pose = *pose;
                self.vo_anchor_position = s.position;
                self.last_vo_time = timestamp.max(self.time);
                Ok(VoOutcome {
                    outcome: Outcome::Accepted,
                    low_motion,
                    measurement: *pose,
                })
            }
            Err(EkfError::Gate { .. }) => {
                self.rejected_vo += 1;
                Ok(VoOutcome {
                    outcome: Outcome::Rejected,
                    low_motion,
                    measurement: *pose,
                })
            }
            Err(e) => Err(e),
        }
    }
}
