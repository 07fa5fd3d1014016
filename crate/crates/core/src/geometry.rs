//! Pinhole camera model and rigid-body algebra shared by every other module.
//!
//! Camera frame: x right, y down, z forward. A [`Pose`] maps points from a
//! source frame into a target frame, `p_target = R * p_source + t`.

use core::ops::Sub;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3};
#[allow(unused_imports)]
use num_traits::Float;

/// 3D point in meters, expressed in whichever frame the caller states.
pub type Point3 = Vector3<f64>;

/// Smallest camera-frame depth accepted by projection.
pub const MIN_DEPTH: f64 = 1e-12;
const GIMBAL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: fx={fx}, fy={fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("matrix is not a proper rotation (orthonormality residual {0:e})")]
    NotARotation(f64),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) || !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Homogeneous normalized coordinates `K^-1 (u, v, 1)`.
    pub fn normalize(&self, px: Pixel) -> Vector3<f64> {
        Vector3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0)
    }

    pub fn denormalize(&self, x: f64, y: f64) -> Pixel {
        Pixel::new(self.fx * x + self.cx, self.fy * y + self.cy)
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

/// Continuous image coordinate in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v.x, v.y)
    }

    pub fn distance(self, other: Pixel) -> f64 {
        (self - other).norm()
    }
}

impl Sub for Pixel {
    type Output = Vector2<f64>;

    fn sub(self, rhs: Pixel) -> Vector2<f64> {
        Vector2::new(self.u - rhs.u, self.v - rhs.v)
    }
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let residual = rotation_residual(&rotation);
        if residual > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotARotation(residual));
        }
        Ok(Self { rotation, translation })
    }

    /// Builds a pose without validation; callers guarantee a proper rotation.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::from_parts(Matrix3::identity(), translation)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::from_parts(q.to_rotation_matrix().into_inner(), translation)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Left increment `Exp(ω) ∘ self` followed by a translation shift `ρ`:
    /// `R' = Exp(ω) R`, `t' = Exp(ω) t + ρ`.
    pub fn retract_left(&self, omega: &Vector3<f64>, rho: &Vector3<f64>) -> Pose {
        let dr = so3_exp(omega);
        Pose {
            rotation: orthonormalize(&(dr * self.rotation)),
            translation: dr * self.translation + rho,
        }
    }

    /// Camera center in the source frame when `self` maps world to camera.
    pub fn center(&self) -> Point3 {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Free-function form of [`Pose::compose`].
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Free-function form of [`Pose::inverse`].
pub fn invert(p: &Pose) -> Pose {
    p.inverse()
}

/// Free-function form of [`Pose::transform_point`].
pub fn transform_point(t: &Pose, p: &Point3) -> Point3 {
    t.transform_point(p)
}

/// Perspective projection of a camera-frame point.
pub fn project(k: &CameraIntrinsics, p: &Point3) -> Result<Pixel, GeometryError> {
    if !(p.z > MIN_DEPTH) {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(Pixel::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// `d · K^-1 · (u, v, 1)`.
pub fn backproject(k: &CameraIntrinsics, px: Pixel, depth: f64) -> Result<Point3, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(k.normalize(px) * depth)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential of an axis-angle vector.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let (a, b) = if theta2 < 1e-16 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + w * a + w * w * b
}

/// Axis-angle logarithm of a rotation matrix.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let rot = Rotation3::from_matrix_unchecked(*r);
    rot.scaled_axis()
}

/// Angle of the relative rotation `aᵀ b`, radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) * 0.5;
    c.clamp(-1.0, 1.0).acos()
}

/// Frobenius norm of `RᵀR − I`.
pub fn rotation_residual(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// Nearest rotation in the Frobenius sense.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * vt;
    }
    out
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Z-Y-X intrinsic composition: `Rz(yaw) · Ry(pitch) · Rx(roll)`.
pub fn euler_to_rotation(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Inverse of [`euler_to_rotation`], returning `(roll, pitch, yaw)`.
///
/// Within 1e-6 of gimbal lock the roll is pinned to zero and the whole
/// in-plane rotation is carried by yaw.
pub fn rotation_to_euler(r: &Matrix3<f64>) -> Vector3<f64> {
    let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if (pitch.abs() - core::f64::consts::FRAC_PI_2).abs() < GIMBAL_EPS {
        // r01 = sp·sr·cy − sy·cr, r11 = sp·sr·sy + cy·cr; with roll = 0 these
        // reduce to −sin(yaw) and cos(yaw).
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        return Vector3::new(0.0, pitch, yaw);
    }
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Vector3::new(roll, pitch, yaw)
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use core::f64::consts::PI;
    let two_pi = 2.0 * PI;
    let mut w = a % two_pi;
    if w <= -PI {
        w += two_pi;
    } else if w > PI {
        w -= two_pi;
    }
    w
}
