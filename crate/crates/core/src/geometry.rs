//! Small fixed-size linear algebra, rigid poses and the pinhole camera model.
//!
//! Camera convention: x right, y down, z forward. Pixel `(x, y)` addresses the
//! sample at integer image coordinates, so the principal point `(cx, cy)` maps
//! to the optical axis.

use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid depth {0}: must be > 0")]
    InvalidDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    pub fn norm(self) -> T {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn cast<U: Real>(self) -> Vec2<U> {
        Vec2::new(U::lit(self.x.as_f64()), U::lit(self.y.as_f64()))
    }
}

impl<T: Real> Add for Vec2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Real> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Real> Mul<T> for Vec2<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n > T::zero() && n.is_finite() {
            Some(self * (T::one() / n))
        } else {
            None
        }
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.z.as_f64()),
        )
    }

    pub fn component_min(self, o: Self) -> Self {
        Self::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn component_max(self, o: Self) -> Self {
        Self::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            m: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn from_rows(m: [[T; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn transpose(&self) -> Self {
        let mut out = *self;
        for r in 0..3 {
            for c in 0..3 {
                out.m[r][c] = self.m[c][r];
            }
        }
        out
    }

    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = Self::identity();
        for r in 0..3 {
            for c in 0..3 {
                out.m[r][c] =
                    self.m[r][0] * o.m[0][c] + self.m[r][1] * o.m[1][c] + self.m[r][2] * o.m[2][c];
            }
        }
        out
    }

    pub fn determinant(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Rodrigues rotation for the axis-angle vector `w` (angle = |w|).
    pub fn from_axis_angle(w: Vec3<T>) -> Self {
        let theta = w.norm();
        let one = T::one();
        let (a, b) = if theta < T::lit(1e-12) {
            // second-order Taylor terms keep the small-angle case accurate
            (one - theta * theta / T::lit(6.0), T::lit(0.5) - theta * theta / T::lit(24.0))
        } else {
            (theta.sin() / theta, (one - theta.cos()) / (theta * theta))
        };
        let k = Self::skew(w);
        let k2 = k.mul_mat(&k);
        let mut out = Self::identity();
        for r in 0..3 {
            for c in 0..3 {
                out.m[r][c] = out.m[r][c] + a * k.m[r][c] + b * k2.m[r][c];
            }
        }
        out
    }

    pub fn skew(w: Vec3<T>) -> Self {
        let z = T::zero();
        Self {
            m: [[z, -w.z, w.y], [w.z, z, -w.x], [-w.y, w.x, z]],
        }
    }

    /// Rotation angle in radians of a rotation matrix.
    pub fn rotation_angle(&self) -> T {
        let tr = self.m[0][0] + self.m[1][1] + self.m[2][2];
        let c = (tr - T::one()) * T::lit(0.5);
        c.max(-T::one()).min(T::one()).acos()
    }

    /// Largest absolute deviation of `RᵀR` from identity.
    pub fn orthonormality_error(&self) -> T {
        let rtr = self.transpose().mul_mat(self);
        let id = Self::identity();
        let mut err = T::zero();
        for r in 0..3 {
            for c in 0..3 {
                err = err.max((rtr.m[r][c] - id.m[r][c]).abs());
            }
        }
        err
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zero(),
        }
    }

    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self::new(Mat3::identity(), t)
    }

    /// Rotation by the axis-angle vector `w` followed by translation `t`.
    pub fn from_axis_angle(w: Vec3<T>, t: Vec3<T>) -> Self {
        Self::new(Mat3::from_axis_angle(w), t)
    }

    /// Builds a pose from a row-major 4×4 matrix, validating rigidity.
    pub fn from_matrix(m: [T; 16]) -> Result<Self, GeometryError> {
        if m[12] != T::zero() || m[13] != T::zero() || m[14] != T::zero() || m[15] != T::one() {
            return Err(GeometryError::InvalidPose(
                "last row must be (0, 0, 0, 1)".into(),
            ));
        }
        let rotation = Mat3::from_rows([[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        let pose = Self::new(rotation, translation);
        pose.validate()?;
        Ok(pose)
    }

    pub fn to_matrix(&self) -> [T; 16] {
        let r = &self.rotation.m;
        let t = self.translation;
        let (z, o) = (T::zero(), T::one());
        [
            r[0][0], r[0][1], r[0][2], t.x, //
            r[1][0], r[1][1], r[1][2], t.y, //
            r[2][0], r[2][1], r[2][2], t.z, //
            z, z, z, o,
        ]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let err = self.rotation.orthonormality_error();
        let det = self.rotation.determinant();
        let tol = T::lit(1e-5);
        if !(err <= tol) || !((det - T::one()).abs() <= tol) {
            return Err(GeometryError::InvalidPose(format!(
                "rotation not orthonormal (err {err}, det {det})"
            )));
        }
        if !self.translation.x.is_finite()
            || !self.translation.y.is_finite()
            || !self.translation.z.is_finite()
        {
            return Err(GeometryError::InvalidPose("non-finite translation".into()));
        }
        Ok(())
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation.mul_mat(&other.rotation),
            self.rotation.mul_vec(other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -rt.mul_vec(self.translation))
    }

    pub fn transform_point(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn rotate(&self, v: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(v)
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        let mut m = [[U::zero(); 3]; 3];
        for (r, row) in self.rotation.m.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                m[r][c] = U::lit(v.as_f64());
            }
        }
        Pose::new(Mat3::from_rows(m), self.translation.cast())
    }
}

/// Applies the rigid transform `pose` to `p`.
pub fn transform<T: Real>(p: Vec3<T>, pose: &Pose<T>) -> Vec3<T> {
    pose.transform_point(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let w = T::lit(self.width as f64);
        let h = T::lit(self.height as f64);
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be > 0".into()));
        }
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    /// Intrinsics of the image downsampled by a factor of two.
    pub fn half(&self) -> Self {
        let half = T::lit(0.5);
        Self {
            fx: self.fx * half,
            fy: self.fy * half,
            cx: (self.cx + half) * half - half,
            cy: (self.cy + half) * half - half,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }

    /// True if the subpixel position lies within `[0, w-1] × [0, h-1]`.
    pub fn contains(&self, u: Vec2<T>) -> bool {
        u.x >= T::zero()
            && u.y >= T::zero()
            && u.x <= T::lit((self.width - 1) as f64)
            && u.y <= T::lit((self.height - 1) as f64)
    }

    /// Nearest integer pixel for a subpixel position, if inside the image.
    pub fn nearest_pixel(&self, u: Vec2<T>) -> Option<(usize, usize)> {
        let x = u.x.round();
        let y = u.y.round();
        if x < T::zero() || y < T::zero() {
            return None;
        }
        let (x, y) = (x.to_usize()?, y.to_usize()?);
        (x < self.width && y < self.height).then_some((x, y))
    }
}

/// Lifts pixel `u` with depth `d` (meters) into camera space.
pub fn backproject<T: Real>(
    u: Vec2<T>,
    d: T,
    intr: &CameraIntrinsics<T>,
) -> Result<Vec3<T>, GeometryError> {
    if !(d > T::zero()) || !d.is_finite() {
        return Err(GeometryError::InvalidDepth(d.as_f64()));
    }
    Ok(Vec3::new(
        (u.x - intr.cx) * d / intr.fx,
        (u.y - intr.cy) * d / intr.fy,
        d,
    ))
}

/// Projects a camera-space point to subpixel coordinates. Bounds are not checked.
pub fn project<T: Real>(p: Vec3<T>, intr: &CameraIntrinsics<T>) -> Result<Vec2<T>, GeometryError> {
    if !(p.z > T::zero()) {
        return Err(GeometryError::BehindCamera(p.z.as_f64()));
    }
    Ok(Vec2::new(
        intr.fx * p.x / p.z + intr.cx,
        intr.fy * p.y / p.z + intr.cy,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intr() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(300.0, 310.0, 159.5, 119.5, 320, 240).unwrap()
    }

    #[test]
    fn principal_point_ray() {
        let i = intr();
        let p = backproject(Vec2::new(i.cx, i.cy), 2.0, &i).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn unit_offset_geometry() {
        let i = intr();
        let p = backproject(Vec2::new(i.cx + i.fx, i.cy), 1.0, &i).unwrap();
        assert_eq!(p, Vec3::new(1.0, 0.0, 1.0));
        assert_eq!(project(Vec3::new(1.0, 0.0, 1.0), &i).unwrap(), Vec2::new(i.cx + i.fx, i.cy));
        assert_eq!(project(Vec3::new(0.0, 0.0, 1.0), &i).unwrap(), Vec2::new(i.cx, i.cy));
    }

    #[test]
    fn invalid_depth_and_behind_camera() {
        let i = intr();
        assert!(matches!(
            backproject(Vec2::new(3.0, 4.0), 0.0, &i),
            Err(GeometryError::InvalidDepth(_))
        ));
        assert!(backproject(Vec2::new(3.0, 4.0), -1.0, &i).is_err());
        assert!(matches!(
            project(Vec3::new(0.0, 0.0, -1.0), &i),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::<f32>::new(1.0, 1.0, 0.0, 3.9, 4, 4).is_ok());
    }

    #[test]
    fn pose_identity_translation_inverse() {
        let p = Vec3::new(0.3, -1.0, 2.0);
        assert_eq!(transform(p, &Pose::identity()), p);
        let t = Pose::from_translation(Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(transform(p, &t), Vec3::new(1.3, 1.0, 5.0));
        let pose = Pose::from_axis_angle(Vec3::new(0.2, -0.4, 0.9), Vec3::new(0.5, 0.1, -2.0));
        let back = transform(p, &pose.compose(&pose.inverse()));
        assert!((back - p).norm() < 1e-6);
    }

    #[test]
    fn pose_matrix_validation() {
        let pose = Pose::from_axis_angle(Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0, 2.0, 3.0));
        let back = Pose::from_matrix(pose.to_matrix()).unwrap();
        assert_eq!(back, pose);
        let mut bad = pose.to_matrix();
        bad[15] = 2.0;
        assert!(Pose::from_matrix(bad).is_err());
        let mut skewed = pose.to_matrix();
        skewed[0] *= 1.01;
        assert!(Pose::from_matrix(skewed).is_err());
    }

    proptest! {
        #[test]
        fn project_backproject_roundtrip(x in 0.0f64..319.0, y in 0.0f64..239.0, d in 0.1f64..10.0) {
            let i = intr();
            let u = Vec2::new(x, y);
            let back = project(backproject(u, d, &i).unwrap(), &i).unwrap();
            prop_assert!((back - u).norm() < 1e-4);
        }

        #[test]
        fn project_backproject_roundtrip_f32(x in 0.0f32..319.0, y in 0.0f32..239.0, d in 0.1f32..10.0) {
            let i = intr().cast::<f32>();
            let u = Vec2::new(x, y);
            let back = project(backproject(u, d, &i).unwrap(), &i).unwrap();
            prop_assert!((back - u).norm() < 1e-3);
        }

        #[test]
        fn rigid_transform_preserves_distances(
            w in prop::array::uniform3(-3.0f64..3.0),
            t in prop::array::uniform3(-5.0f64..5.0),
            a in prop::array::uniform3(-5.0f64..5.0),
            b in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let pose = Pose::from_axis_angle(Vec3::from_array(w), Vec3::from_array(t));
            let (a, b) = (Vec3::from_array(a), Vec3::from_array(b));
            let d0 = (a - b).norm();
            let d1 = (transform(a, &pose) - transform(b, &pose)).norm();
            prop_assert!((d0 - d1).abs() < 1e-6);
            prop_assert!((pose.rotation.determinant() - 1.0).abs() < 1e-5);
            prop_assert!(pose.validate().is_ok());
        }
    }
}
