//! Pinhole camera model and SE(3) machinery.
//!
//! Twists are ordered `[v; ω]`: three translational components followed by
//! three rotational ones. A pose maps points expressed in one camera frame into
//! another, `q = R p + t`. Relative poses produced by the aligner take frame-A
//! coordinates into frame-B coordinates.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix3x6, Point2, Point3, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

/// Angles below this use the series expansions in `exp`/`log`.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Orthonormality defect above which rotations are re-projected onto SO(3).
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-9;

/// Calibrated pinhole intrinsics (no distortion).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Raw depth units per meter (5000 for TUM).
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        depth_scale: f64,
    ) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale,
        };
        k.validate()?;
        Ok(k)
    }

    /// Default Kinect-style calibration used when a dataset ships none.
    pub fn tum_default() -> Self {
        Intrinsics {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
            depth_scale: 5000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.depth_scale]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("non-finite intrinsics".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 || self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if self.depth_scale <= 0.0 {
            return Err(Error::InvalidArgument("depth_scale must be positive".into()));
        }
        Ok(())
    }

    /// Intrinsics of the next pyramid level (2x2 averaging, odd remainders dropped).
    pub fn downsampled(&self) -> Self {
        Intrinsics {
            fx: self.fx * 0.5,
            fy: self.fy * 0.5,
            cx: (self.cx + 0.5) * 0.5 - 0.5,
            cy: (self.cy + 0.5) * 0.5 - 0.5,
            width: self.width / 2,
            height: self.height / 2,
            depth_scale: self.depth_scale,
        }
    }

    pub fn contains(&self, pixel: &Point2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }
}

/// Element of se(3): `[v; ω]` in meters and radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(v: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Twist(Vector6::new(v.x, v.y, v.z, omega.x, omega.y, omega.z))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking the rotation is a proper rotation to within 1e-6
    /// and re-orthonormalizing away any remaining defect.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pose".into()));
        }
        if orthonormality_defect(&rotation) > 1e-6 || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidArgument("matrix is not a rotation".into()));
        }
        Ok(Pose::from_parts_unchecked(rotation, translation).renormalized())
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
        .renormalized()
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let (sin, cos) = sin_cos_of_rotation(&self.rotation);
        sin.atan2(cos)
    }

    /// Re-projects the rotation onto SO(3) (polar decomposition) if its
    /// defect exceeds [`ORTHONORMALITY_TOLERANCE`].
    pub fn renormalized(mut self) -> Pose {
        if orthonormality_defect(&self.rotation) > ORTHONORMALITY_TOLERANCE {
            self.rotation = nearest_rotation(&self.rotation);
        }
        self
    }

    pub fn exp(twist: &Twist) -> Result<Pose> {
        se3_exp(twist)
    }

    pub fn log(&self) -> Twist {
        se3_log(self)
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Mul::mul(&self, &rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
        .renormalized()
    }
}

/// Frobenius norm of `RᵀR − I`.
pub fn orthonormality_defect(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// Closest rotation in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut fix = Matrix3::identity();
        fix[(2, 2)] = -1.0;
        r = u * fix * v_t;
    }
    r
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

fn sin_cos_of_rotation(r: &Matrix3<f64>) -> (f64, f64) {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = (0.5 * vee(&(r - r.transpose())).norm()).min(1.0);
    (sin, cos)
}

/// Exponential map se(3) → SE(3).
pub fn se3_exp(twist: &Twist) -> Result<Pose> {
    if !twist.is_finite() {
        return Err(Error::InvalidArgument("non-finite twist".into()));
    }
    let v = twist.translation();
    let w = twist.rotation();
    let theta = w.norm();
    let wx = hat(&w);
    let wx2 = wx * wx;
    let (a, b, c) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    let rotation = Matrix3::identity() + wx * a + wx2 * b;
    let left_jacobian = Matrix3::identity() + wx * b + wx2 * c;
    Ok(Pose {
        rotation,
        translation: left_jacobian * v,
    }
    .renormalized())
}

/// Logarithm SE(3) → se(3); the rotation angle of the result lies in `[0, π]`.
pub fn se3_log(pose: &Pose) -> Twist {
    let r = &pose.rotation;
    let (sin, cos) = sin_cos_of_rotation(r);
    let theta = sin.atan2(cos);

    let w = if theta < SMALL_ANGLE {
        // R ≈ I + [w]x
        vee(&(r - r.transpose())) * 0.5
    } else if theta > std::f64::consts::PI - 1e-4 {
        // Near π the antisymmetric part vanishes; read the axis off the
        // symmetric part instead: sym(R) = cosθ I + (1 − cosθ) a aᵀ.
        let sym = (r + r.transpose()) * 0.5;
        let aat = (sym - Matrix3::identity() * cos) / (1.0 - cos);
        let col = (0..3)
            .max_by(|&i, &j| aat[(i, i)].total_cmp(&aat[(j, j)]))
            .unwrap_or(0);
        let mut axis = aat.column(col).into_owned() / aat[(col, col)].max(f64::MIN_POSITIVE).sqrt();
        axis /= axis.norm();
        if axis.dot(&vee(&(r - r.transpose()))) < 0.0 {
            axis = -axis;
        }
        axis * theta
    } else {
        vee(&(r - r.transpose())) * (theta / (2.0 * sin))
    };

    let wx = hat(&w);
    let coeff = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
    };
    let left_jacobian_inv = Matrix3::identity() - wx * 0.5 + wx * wx * coeff;
    Twist::new(left_jacobian_inv * pose.translation, w)
}

/// Pinhole back-projection of a pixel at metric depth.
pub fn backproject(k: &Intrinsics, pixel: &Point2<f64>, depth: f64) -> Result<Point3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(Point3::new(
        (pixel.x - k.cx) * depth / k.fx,
        (pixel.y - k.cy) * depth / k.fy,
        depth,
    ))
}

/// Sub-pixel projection. `in_frame` is false when the pixel falls outside
/// `[0, w−1] × [0, h−1]`; that is not an error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Point2<f64>,
    pub in_frame: bool,
}

pub fn project(k: &Intrinsics, point: &Point3<f64>) -> Result<Projection> {
    if !(point.z > 0.0) {
        return Err(Error::BehindCamera(point.z));
    }
    let pixel = Point2::new(
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    );
    Ok(Projection {
        in_frame: k.contains(&pixel),
        pixel,
    })
}

/// `K T K⁻¹(pixel, depth)`.
pub fn warp_pixel(k: &Intrinsics, pose: &Pose, pixel: &Point2<f64>, depth: f64) -> Result<Projection> {
    let p = backproject(k, pixel, depth)?;
    project(k, &pose.transform(&p))
}

/// Derivative of `exp(δ) q` with respect to δ at δ = 0: `[I | −[q]x]`.
pub fn point_jacobian(q: &Point3<f64>) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&q.coords)));
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 100.0, 100.0, 200, 200, 5000.0).unwrap()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(se3_exp(&Twist::zero()).unwrap(), Pose::identity());
    }

    #[test]
    fn exp_pure_translation() {
        let p = se3_exp(&Twist(Vector6::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0))).unwrap();
        assert_eq!(*p.rotation(), Matrix3::identity());
        assert_eq!(*p.translation(), Vector3::new(0.1, 0.0, 0.0));
    }

    #[test]
    fn exp_quarter_turn_about_z_matches_closed_form() {
        // Rodrigues at θ = π/2 about z gives [[0,-1,0],[1,0,0],[0,0,1]].
        // With W = θ·hat(z): W x = θ y and W² x = −θ² x, so the left Jacobian
        // V = I + (1−cosθ)/θ² W + (θ−sinθ)/θ³ W² sends x to
        // (1 − (θ−sinθ)/θ) x + ((1−cosθ)/θ) y.
        let theta = PI / 2.0;
        let p = se3_exp(&Twist(Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, theta))).unwrap();
        let expected_r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(*p.rotation(), expected_r, epsilon = 1e-15);
        let b = (1.0 - theta.cos()) / theta;
        let c = (theta - theta.sin()) / theta;
        let expected_t = Vector3::new(1.0 - c, b, 0.0);
        assert_relative_eq!(*p.translation(), expected_t, epsilon = 1e-15);
    }

    #[test]
    fn exp_rejects_non_finite() {
        let t = Twist(Vector6::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(matches!(se3_exp(&t), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn log_of_identity_and_translation() {
        assert_eq!(se3_log(&Pose::identity()), Twist::zero());
        let tw = se3_log(&Pose::from_translation(Vector3::new(0.0, 0.0, 0.5)));
        assert_eq!(tw.0, Vector6::new(0.0, 0.0, 0.5, 0.0, 0.0, 0.0));
    }

    #[test]
    fn log_at_pi_uses_symmetric_branch() {
        for axis in [Vector3::x(), Vector3::y(), Vector3::new(1.0, 1.0, 0.0).normalize()] {
            let tw = Twist::new(Vector3::new(0.3, -0.2, 0.1), axis * PI);
            let p = se3_exp(&tw).unwrap();
            let back = se3_log(&p);
            assert!(back.0.iter().all(|v| v.is_finite()));
            assert_relative_eq!(back.rotation().norm(), PI, epsilon = 1e-9);
            let again = se3_exp(&back).unwrap();
            assert_relative_eq!(*again.rotation(), *p.rotation(), epsilon = 1e-9);
            assert_relative_eq!(*again.translation(), *p.translation(), epsilon = 1e-9);
        }
    }

    #[test]
    fn small_angle_series_is_continuous() {
        let tiny = Twist(Vector6::new(0.1, 0.2, 0.3, 1e-9, -2e-9, 5e-10));
        let p = se3_exp(&tiny).unwrap();
        let back = se3_log(&p);
        assert_relative_eq!(back.0, tiny.0, epsilon = 1e-15);
    }

    #[test]
    fn backproject_examples() {
        let k = k100();
        let p = backproject(&k, &Point2::new(100.0, 100.0), 2.0).unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 2.0));
        let p = backproject(&k, &Point2::new(150.0, 100.0), 2.0).unwrap();
        assert_eq!(p, Point3::new(1.0, 0.0, 2.0));
        assert!(matches!(
            backproject(&k, &Point2::new(1.0, 1.0), 0.0),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn project_examples() {
        let k = k100();
        assert_eq!(project(&k, &Point3::new(0.0, 0.0, 1.0)).unwrap().pixel, Point2::new(100.0, 100.0));
        assert_eq!(project(&k, &Point3::new(1.0, 0.0, 2.0)).unwrap().pixel, Point2::new(150.0, 100.0));
        // Independent check via the homogeneous matrix product K·p / z.
        let kmat = Matrix3::new(100.0, 0.0, 100.0, 0.0, 100.0, 100.0, 0.0, 0.0, 1.0);
        let h = kmat * Vector3::new(1.0, 0.0, 1.5);
        let pr = project(&k, &Point3::new(1.0, 0.0, 1.5)).unwrap();
        assert_relative_eq!(pr.pixel.x, h.x / h.z, epsilon = 1e-12);
        assert_relative_eq!(pr.pixel.x, 166.666_666_666_666_67, epsilon = 1e-9);
        assert!(matches!(project(&k, &Point3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera(_))));
        let out = project(&k, &Point3::new(10.0, 0.0, 1.0)).unwrap();
        assert!(!out.in_frame);
    }

    #[test]
    fn warp_examples() {
        let k = k100();
        let id = warp_pixel(&k, &Pose::identity(), &Point2::new(37.25, 12.5), 1.7).unwrap();
        assert!((id.pixel - Point2::new(37.25, 12.5)).norm() < 1e-12);

        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -0.5));
        let w = warp_pixel(&k, &pose, &Point2::new(150.0, 100.0), 2.0).unwrap();
        assert_relative_eq!(w.pixel.x, 100.0 + 100.0 / 1.5, epsilon = 1e-12);
        assert_relative_eq!(w.pixel.y, 100.0, epsilon = 1e-12);

        // Rotation by θ about the optical axis maps (cx + r, cy) to
        // (cx + r cosθ, cy + r sinθ) for equal focal lengths.
        let theta = PI / 2.0;
        let rot = se3_exp(&Twist(Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, theta))).unwrap();
        let r = 30.0;
        let w = warp_pixel(&k, &rot, &Point2::new(100.0 + r, 100.0), 3.0).unwrap();
        assert_relative_eq!(w.pixel.x, 100.0 + r * theta.cos(), epsilon = 1e-9);
        assert_relative_eq!(w.pixel.y, 100.0 + r * theta.sin(), epsilon = 1e-9);

        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -5.0));
        assert!(matches!(
            warp_pixel(&k, &behind, &Point2::new(10.0, 10.0), 2.0),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn composition_stays_orthonormal() {
        let step = se3_exp(&Twist(Vector6::new(0.01, -0.02, 0.005, 0.013, 0.007, -0.011))).unwrap();
        let mut p = Pose::identity();
        for _ in 0..10_000 {
            p = p * step;
        }
        assert!(orthonormality_defect(p.rotation()) <= ORTHONORMALITY_TOLERANCE);
        assert_relative_eq!(p.rotation().determinant(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let p = se3_exp(&Twist(Vector6::new(0.3, 0.1, -0.4, 0.2, -0.5, 0.9))).unwrap();
        let e = p * p.inverse();
        assert_relative_eq!(*e.rotation(), Matrix3::identity(), epsilon = 1e-14);
        assert!(e.translation().norm() < 1e-14);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10, 1.0).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 10.0, 1.0, 10, 10, 1.0).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 1.0, 1.0, 10, 10, 0.0).is_err());
        let k = Intrinsics::tum_default().downsampled();
        assert_eq!((k.width, k.height), (320, 240));
        assert_relative_eq!(k.cx, 159.5);
    }

    fn twist_strategy() -> impl Strategy<Value = Twist> {
        (
            prop::array::uniform3(-2.0f64..2.0),
            prop::array::uniform3(-1.0f64..1.0),
            0.0f64..(PI - 1e-3),
        )
            .prop_filter_map("non-zero axis", |(v, a, angle)| {
                let axis = Vector3::from(a);
                let n = axis.norm();
                (n > 1e-3).then(|| Twist::new(Vector3::from(v), axis / n * angle))
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn exp_log_roundtrip(tw in twist_strategy()) {
            let p = se3_exp(&tw).unwrap();
            let back = se3_log(&p);
            prop_assert!((back.0 - tw.0).norm() < 1e-9);
            let again = se3_exp(&back).unwrap();
            prop_assert!((again.rotation() - p.rotation()).norm() < 1e-9);
            prop_assert!((again.translation() - p.translation()).norm() < 1e-9);
        }

        #[test]
        fn project_backproject_roundtrip(u in 0.0f64..199.0, v in 0.0f64..199.0, d in 0.1f64..20.0) {
            let k = k100();
            let p = backproject(&k, &Point2::new(u, v), d).unwrap();
            let pr = project(&k, &p).unwrap();
            prop_assert!(pr.in_frame);
            prop_assert!((pr.pixel - Point2::new(u, v)).norm() < 1e-9);
        }
    }
}
