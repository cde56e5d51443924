//! Quaternion and rigid-transform algebra, pinhole projection, image lines,
//! and the rotation metrics used throughout the crate.
//!
//! Quaternions are Hamilton, scalar first `(w, x, y, z)`. A [`Rigid3`] maps
//! points from its source frame into its target frame as `R p + t`; the
//! extrinsic maps camera-frame points into the lidar frame.

use std::f64::consts::FRAC_PI_2;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

/// Tolerance on `|q| - 1` accepted by operations that require a unit quaternion.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Smallest camera-frame depth considered in front of the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 4]> for Quat {
    fn from(v: [f64; 4]) -> Self {
        Quat::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Quat> for [f64; 4] {
    fn from(q: Quat) -> Self {
        [q.w, q.x, q.y, q.z]
    }
}

impl Quat {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    /// Unit quaternion rotating by `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let a = axis / n;
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    /// Exponential map of a rotation vector (axis times angle).
    pub fn from_rotation_vector(v: &Vector3<f64>) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    /// Rotation vector with angle in `[0, π]`.
    pub fn to_rotation_vector(&self) -> Vector3<f64> {
        let q = if self.w < 0.0 { -*self } else { *self };
        let v = q.vector();
        let s = v.norm();
        if s < 1e-300 {
            return Vector3::zeros();
        }
        let angle = 2.0 * s.atan2(q.w);
        v * (angle / s)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    /// Imaginary part.
    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// 4-vector dot product.
    pub fn dot(&self, other: &Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Sign representative whose largest-magnitude component is non-negative.
    pub fn canonical(&self) -> Self {
        let c = [self.w, self.x, self.y, self.z];
        let mut best = 0;
        for i in 1..4 {
            if c[i].abs() > c[best].abs() {
                best = i;
            }
        }
        if c[best] < 0.0 {
            -*self
        } else {
            *self
        }
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let Quat { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Rotates `v` by this (unit) quaternion.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let u = self.vector();
        let uv = u.cross(v);
        v + (uv * self.w + u.cross(&uv)) * 2.0
    }
}

impl std::ops::Neg for Quat {
    type Output = Quat;
    fn neg(self) -> Quat {
        Quat::new(-self.w, -self.x, -self.y, -self.z)
    }
}

impl Mul for Quat {
    type Output = Quat;
    /// Hamilton product.
    fn mul(self, r: Quat) -> Quat {
        let l = self;
        Quat::new(
            l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y,
            l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x,
            l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w,
        )
    }
}

/// Matrix of left multiplication: `left_quat_matrix(q) * p == q ⊗ p`.
pub fn left_quat_matrix(q: &Quat) -> Matrix4<f64> {
    let Quat { w, x, y, z } = *q;
    #[rustfmt::skip]
    let m = Matrix4::new(
        w, -x, -y, -z,
        x,  w, -z,  y,
        y,  z,  w, -x,
        z, -y,  x,  w,
    );
    m
}

/// Matrix of right multiplication: `right_quat_matrix(q) * p == p ⊗ q`.
pub fn right_quat_matrix(q: &Quat) -> Matrix4<f64> {
    let Quat { w, x, y, z } = *q;
    #[rustfmt::skip]
    let m = Matrix4::new(
        w, -x, -y, -z,
        x,  w,  z, -y,
        y, -z,  w,  x,
        z,  y, -x,  w,
    );
    m
}

fn require_unit(q: &Quat) -> Result<()> {
    if q.is_unit() {
        Ok(())
    } else {
        Err(CalibError::NonUnitQuaternion(q.norm()))
    }
}

/// Rotation angle `2·acos(|w|)` in `[0, π]`.
///
/// Evaluated as `2·atan2(|v|, |w|)`, which equals the arccosine form for unit
/// quaternions but keeps full precision near the identity.
pub fn rotation_angle(q: &Quat) -> Result<f64> {
    require_unit(q)?;
    Ok(2.0 * q.vector().norm().atan2(q.w.abs()))
}

/// Normalized rotation distance `acos(|q1·q2|) / (π/2)`, in `[0, 1]`.
///
/// The angle between the two 4-vectors is computed as `2·atan2(|a−b|, |a+b|)`
/// after aligning signs, so nearly equal rotations do not lose half their
/// digits to the arccosine.
pub fn rotation_error(q1: &Quat, q2: &Quat) -> Result<f64> {
    require_unit(q1)?;
    require_unit(q2)?;
    let a = q1.normalized().to_vector();
    let mut b = q2.normalized().to_vector();
    if a.dot(&b) < 0.0 {
        b = -b;
    }
    Ok(2.0 * (a - b).norm().atan2((a + b).norm()) / FRAC_PI_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rigid3 {
    pub rotation: Quat,
    pub translation: Vector3<f64>,
}

impl Default for Rigid3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rigid3 {
    pub fn new(rotation: Quat, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Quat::identity(), Vector3::zeros())
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid3) -> Rigid3 {
        Rigid3 {
            rotation: (self.rotation * other.rotation).normalized(),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Rigid3 {
        let r = self.rotation.conjugate();
        Rigid3 {
            rotation: r,
            translation: -r.rotate(&self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Maps a target-frame point back into the source frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.conjugate().rotate(&(p - self.translation))
    }
}

impl Mul for Rigid3 {
    type Output = Rigid3;
    fn mul(self, rhs: Rigid3) -> Rigid3 {
        self.compose(&rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width
            && self.cy > 0.0
            && self.cy < self.height;
        if ok {
            Ok(())
        } else {
            Err(CalibError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64, margin: f64) -> bool {
        u >= -margin && u <= self.width + margin && v >= -margin && v <= self.height + margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

/// Projects a lidar-frame point through extrinsic `t` (camera to lidar) and intrinsics `k`.
pub fn project_point(k: &CameraIntrinsics, t: &Rigid3, p: &Vector3<f64>) -> Result<Projection> {
    let pc = t.inverse_transform_point(p);
    let depth = pc.z;
    if depth <= MIN_DEPTH {
        return Err(CalibError::BehindCamera(depth));
    }
    Ok(Projection {
        u: k.fx * pc.x / depth + k.cx,
        v: k.fy * pc.y / depth + k.cy,
        depth,
    })
}

/// Homogeneous image line `w0·u + w1·v + w2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line2D {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub normalized: bool,
}

impl Line2D {
    pub fn new(w0: f64, w1: f64, w2: f64) -> Self {
        Self {
            w0,
            w1,
            w2,
            normalized: false,
        }
    }

    /// Scales so that `w0² + w1² = 1`.
    pub fn normalize(&self) -> Self {
        let n = self.w0.hypot(self.w1);
        Self {
            w0: self.w0 / n,
            w1: self.w1 / n,
            w2: self.w2 / n,
            normalized: true,
        }
    }

    /// Algebraic distance; signed pixels when normalized.
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        self.w0 * u + self.w1 * v + self.w2
    }

    pub fn coefficients(&self) -> Vector3<f64> {
        Vector3::new(self.w0, self.w1, self.w2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment2D {
    pub p0: Vector2<f64>,
    pub p1: Vector2<f64>,
}

impl Segment2D {
    pub const MIN_LENGTH: f64 = 1e-9;

    pub fn new(p0: Vector2<f64>, p1: Vector2<f64>) -> Self {
        Self { p0, p1 }
    }

    pub fn length(&self) -> f64 {
        (self.p1 - self.p0).norm()
    }

    /// Unit direction from `p0` to `p1`.
    pub fn direction(&self) -> Option<Vector2<f64>> {
        let d = self.p1 - self.p0;
        let n = d.norm();
        (n > Self::MIN_LENGTH).then(|| d / n)
    }

    pub fn midpoint(&self) -> Vector2<f64> {
        (self.p0 + self.p1) * 0.5
    }
}

/// Normalized line through both segment endpoints, with `w0 > 0`, or `w0 = 0` and `w1 > 0`.
pub fn segment_to_line(s: &Segment2D) -> Result<Line2D> {
    let d = s.direction().ok_or(CalibError::DegenerateSegment)?;
    let (mut w0, mut w1) = (-d.y, d.x);
    if w0 < 0.0 || (w0 == 0.0 && w1 < 0.0) {
        w0 = -w0;
        w1 = -w1;
    }
    // anchor on the midpoint so both endpoints carry symmetric rounding
    let m = s.midpoint();
    Ok(Line2D {
        w0,
        w1,
        w2: -(w0 * m.x + w1 * m.y),
        normalized: true,
    })
}

/// Vertical scene line in the lidar frame, direction fixed to the lidar Y axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerticalLine3D {
    pub x: f64,
    pub z: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub support: usize,
}

impl VerticalLine3D {
    pub fn point_at(&self, y: f64) -> Vector3<f64> {
        Vector3::new(self.x, y, self.z)
    }

    pub fn mid_height(&self) -> f64 {
        0.5 * (self.y_min + self.y_max)
    }

    pub fn height_extent(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Horizontal distance between two lines.
    pub fn floor_distance(&self, other: &VerticalLine3D) -> f64 {
        (self.x - other.x).hypot(self.z - other.z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    // Hamilton product written out component by component, kept separate
    // from `Mul` so the multiplication matrices are checked against it.
    fn hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
        let [a1, b1, c1, d1] = a;
        let [a2, b2, c2, d2] = b;
        [
            a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
        ]
    }

    fn q4() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-2.0f64..2.0)
    }

    fn unit_quat() -> impl Strategy<Value = Quat> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
            .prop_map(|v| Quat::from(v).normalized())
    }

    #[test]
    fn left_matrix_examples() {
        assert_eq!(left_quat_matrix(&Quat::identity()), Matrix4::identity());
        #[rustfmt::skip]
        let expected = Matrix4::new(
            0.0, -1.0, 0.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, -1.0,
            0.0, 0.0, 1.0, 0.0,
        );
        assert_eq!(left_quat_matrix(&Quat::new(0.0, 1.0, 0.0, 0.0)), expected);
    }

    #[test]
    fn right_matrix_examples() {
        assert_eq!(right_quat_matrix(&Quat::identity()), Matrix4::identity());
        #[rustfmt::skip]
        let expected = Matrix4::new(
            0.0, -1.0, 0.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            0.0, 0.0, -1.0, 0.0,
        );
        assert_eq!(right_quat_matrix(&Quat::new(0.0, 1.0, 0.0, 0.0)), expected);
    }

    proptest! {
        #[test]
        fn quat_matrices_match_hamilton_product(q in q4(), p in q4()) {
            let qv = Quat::from(q);
            let pv = Vector4::from(p);
            let left = left_quat_matrix(&qv) * pv;
            let right = right_quat_matrix(&qv) * pv;
            let qp = hamilton(q, p);
            let pq = hamilton(p, q);
            for i in 0..4 {
                prop_assert!((left[i] - qp[i]).abs() < 1e-12);
                prop_assert!((right[i] - pq[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn rotation_error_symmetric_and_sign_invariant(a in unit_quat(), b in unit_quat()) {
            let e = rotation_error(&a, &b).unwrap();
            prop_assert!((e - rotation_error(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!((e - rotation_error(&-a, &b).unwrap()).abs() < 1e-15);
            prop_assert!((e - rotation_error(&a, &-b).unwrap()).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert_eq!(rotation_error(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn compose_with_inverse_is_identity(q in unit_quat(), t in prop::array::uniform3(-5.0f64..5.0)) {
            let a = Rigid3::new(q, Vector3::from(t));
            let id = a.compose(&a.inverse());
            prop_assert!(rotation_error(&id.rotation, &Quat::identity()).unwrap() < 1e-12);
            prop_assert!((id.rotation.w.abs() - 1.0).abs() < 1e-10);
            prop_assert!(id.translation.norm() < 1e-10);
        }

        #[test]
        fn rotation_matrix_agrees_with_rotate(q in unit_quat(), v in prop::array::uniform3(-3.0f64..3.0)) {
            let v = Vector3::from(v);
            let a = q.to_rotation_matrix() * v;
            let b = q.rotate(&v);
            prop_assert!((a - b).norm() < 1e-12);
        }

        #[test]
        fn canonical_is_same_rotation(q in unit_quat()) {
            let c = q.canonical();
            prop_assert_eq!(rotation_error(&q, &c).unwrap(), 0.0);
            prop_assert_eq!(c, (-q).canonical());
        }

        #[test]
        fn segment_line_passes_through_endpoints(p in prop::array::uniform4(-1000.0f64..1000.0)) {
            let s = Segment2D::new(Vector2::new(p[0], p[1]), Vector2::new(p[2], p[3]));
            prop_assume!(s.length() > 1e-3);
            let l = segment_to_line(&s).unwrap();
            prop_assert!(l.eval(p[0], p[1]).abs() < 1e-9);
            prop_assert!(l.eval(p[2], p[3]).abs() < 1e-9);
            prop_assert!((l.w0 * l.w0 + l.w1 * l.w1 - 1.0).abs() < 1e-12);
            prop_assert!(l.w0 > 0.0 || (l.w0 == 0.0 && l.w1 > 0.0));
        }

        #[test]
        fn projection_round_trips(q in unit_quat(), t in prop::array::uniform3(-2.0f64..2.0),
                                  pc in (-3.0f64..3.0, -3.0f64..3.0, 0.5f64..20.0)) {
            let k = CameraIntrinsics::default();
            let ext = Rigid3::new(q, Vector3::from(t));
            let p_cam = Vector3::new(pc.0, pc.1, pc.2);
            let p = ext.transform_point(&p_cam);
            let proj = project_point(&k, &ext, &p).unwrap();
            // back-ray through the pixel at the reported depth
            let ray = Vector3::new((proj.u - k.cx) / k.fx, (proj.v - k.cy) / k.fy, 1.0);
            let back = ext.transform_point(&(ray * proj.depth));
            prop_assert!((back - p).norm() < 1e-9);
        }
    }

    #[test]
    fn rotation_angle_examples() {
        assert_eq!(rotation_angle(&Quat::identity()).unwrap(), 0.0);
        let q = Quat::new(FRAC_PI_4.cos(), FRAC_PI_4.sin(), 0.0, 0.0);
        assert_abs_diff_eq!(rotation_angle(&q).unwrap(), PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rotation_angle(&-q).unwrap(), PI / 2.0, epsilon = 1e-12);
        assert!(matches!(
            rotation_angle(&Quat::new(2.0, 0.0, 0.0, 0.0)),
            Err(CalibError::NonUnitQuaternion(_))
        ));
    }

    #[test]
    fn rotation_error_examples() {
        let q = Quat::from_axis_angle(&Vector3::new(0.3, -1.0, 2.0), 0.7);
        assert_eq!(rotation_error(&q, &q).unwrap(), 0.0);
        assert_eq!(rotation_error(&q, &-q).unwrap(), 0.0);
        let r = Quat::new(FRAC_PI_4.cos(), FRAC_PI_4.sin(), 0.0, 0.0);
        assert_abs_diff_eq!(
            rotation_error(&Quat::identity(), &r).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        assert!(rotation_error(&Quat::new(0.0, 0.0, 0.0, 0.0), &r).is_err());
    }

    #[test]
    fn project_point_examples() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap();
        let p = project_point(&k, &Rigid3::identity(), &Vector3::new(0.0, 1.0, 2.0)).unwrap();
        assert_abs_diff_eq!(p.u, 320.0);
        assert_abs_diff_eq!(p.v, 490.0);
        assert_abs_diff_eq!(p.depth, 2.0);
        assert!(matches!(
            project_point(&k, &Rigid3::identity(), &Vector3::new(0.0, 0.0, -1.0)),
            Err(CalibError::BehindCamera(_))
        ));
    }

    #[test]
    fn segment_to_line_examples() {
        let v_axis = Segment2D::new(Vector2::new(0.0, 0.0), Vector2::new(0.0, 10.0));
        let l = segment_to_line(&v_axis).unwrap();
        assert_eq!((l.w0, l.w1, l.w2), (1.0, 0.0, 0.0));
        let horiz = Segment2D::new(Vector2::new(0.0, 5.0), Vector2::new(10.0, 5.0));
        let l = segment_to_line(&horiz).unwrap();
        assert_eq!((l.w0, l.w1, l.w2), (0.0, 1.0, -5.0));
        let point = Segment2D::new(Vector2::new(1.0, 1.0), Vector2::new(1.0, 1.0));
        assert!(matches!(
            segment_to_line(&point),
            Err(CalibError::DegenerateSegment)
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 500.0, 320.0, 240.0, 640.0, 480.0).is_err());
        assert!(CameraIntrinsics::new(500.0, 500.0, 700.0, 240.0, 640.0, 480.0).is_err());
        assert!(CameraIntrinsics::default().validate().is_ok());
    }

    #[test]
    fn rotation_vector_round_trip() {
        let v = Vector3::new(0.2, -0.4, 1.1);
        let q = Quat::from_rotation_vector(&v);
        assert!((q.to_rotation_vector() - v).norm() < 1e-12);
        assert_eq!(Quat::identity().to_rotation_vector(), Vector3::zeros());
    }
}
