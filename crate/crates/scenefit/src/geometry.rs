//! Pinhole camera model and SE(3) machinery.
//!
//! Conventions used throughout the crate:
//! - Pixel centers sit at integer coordinates; an image spans
//!   `[0, W-1] x [0, H-1]`.
//! - A [`RigidTransform`] maps a point expressed in the *target* camera frame
//!   into a *source* camera frame — the direction needed by inverse warping.
//! - Rotations are stored as axis-angle vectors (radians times unit axis) and
//!   materialized with the Rodrigues formula; near zero angle a second-order
//!   Taylor expansion keeps the map (and its derivative) finite, which
//!   matters because the identity is the optimization starting point.

use crate::autodiff::Scalar;
use crate::{Error, Result};

/// Points with z at or below this are treated as behind the camera.
pub const EPS_Z: f64 = 1e-6;

/// Below this rotation angle the Rodrigues coefficients switch to their
/// Taylor expansions in theta^2.
pub const RODRIGUES_TAYLOR_ANGLE: f64 = 1e-4;

/// Pinhole intrinsics: focal lengths and principal point, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && cx.is_finite() && cy.is_finite()) {
            return Err(Error::Config(format!(
                "invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }
}

/// Continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord<S = f64> {
    pub u: S,
    pub v: S,
}

/// Camera-frame 3D point, in scene units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3<S = f64> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl Point3<f64> {
    pub fn dist(&self, other: &Point3<f64>) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// One rigid-body motion, stored as axis-angle plus translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<S = f64> {
    pub axis_angle: [S; 3],
    pub translation: [S; 3],
}

impl RigidTransform<f64> {
    pub fn identity() -> Self {
        RigidTransform {
            axis_angle: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn new(axis_angle: [f64; 3], translation: [f64; 3]) -> Self {
        RigidTransform {
            axis_angle,
            translation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.axis_angle.iter().chain(&self.translation).all(|v| v.is_finite())
    }

    /// Composition `self ∘ other`: apply `other` first, then `self`.
    /// Axis-angle of the product is recovered from the product matrix.
    pub fn compose(&self, other: &RigidTransform<f64>) -> RigidTransform<f64> {
        let ra = rotation_of(self);
        let rb = rotation_of(other);
        let mut rc = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rc[i][j] = ra.m[i][0] * rb.m[0][j] + ra.m[i][1] * rb.m[1][j] + ra.m[i][2] * rb.m[2][j];
            }
        }
        let tb = apply_rotation(&ra, &Point3 {
            x: other.translation[0],
            y: other.translation[1],
            z: other.translation[2],
        });
        RigidTransform {
            axis_angle: axis_angle_from_matrix(&rc),
            translation: [
                tb.x + self.translation[0],
                tb.y + self.translation[1],
                tb.z + self.translation[2],
            ],
        }
    }
}

/// 3x3 rotation matrix over any scalar carrier.
#[derive(Clone, Copy, Debug)]
pub struct RotationMatrix<S = f64> {
    pub m: [[S; 3]; 3],
}

/// Rodrigues formula `R = I + A [v]x + B [v]x^2` with `A = sin(t)/t`,
/// `B = (1-cos(t))/t^2`, `t = |v|`. Below [`RODRIGUES_TAYLOR_ANGLE`] the
/// coefficients use Taylor expansions in `s = t^2`, so the expression stays
/// smooth (and differentiable) through the identity.
pub fn rotation_of_s<S: Scalar>(axis_angle: &[S; 3]) -> RotationMatrix<S> {
    let [x, y, z] = *axis_angle;
    let s = x * x + y * y + z * z;
    let (a, b) = if s.value() < RODRIGUES_TAYLOR_ANGLE * RODRIGUES_TAYLOR_ANGLE {
        let a = s * s * (1.0 / 120.0) - s * (1.0 / 6.0) + 1.0;
        let b = s * s * (1.0 / 720.0) - s * (1.0 / 24.0) + 0.5;
        (a, b)
    } else {
        let theta = s.sqrt();
        let a = theta.sin() / theta;
        let b = theta.cos().one_minus() / s;
        (a, b)
    };
    let xx = x * x;
    let yy = y * y;
    let zz = z * z;
    let xy = x * y;
    let xz = x * z;
    let yz = y * z;
    RotationMatrix {
        m: [
            [
                (b * (yy + zz)).one_minus(),
                b * xy - a * z,
                b * xz + a * y,
            ],
            [
                b * xy + a * z,
                (b * (xx + zz)).one_minus(),
                b * yz - a * x,
            ],
            [
                b * xz - a * y,
                b * yz + a * x,
                (b * (xx + yy)).one_minus(),
            ],
        ],
    }
}

/// Concrete rotation matrix of a transform.
pub fn rotation_of(t: &RigidTransform<f64>) -> RotationMatrix<f64> {
    rotation_of_s(&t.axis_angle)
}

/// Recovers an axis-angle vector from a rotation matrix (log map).
pub fn axis_angle_from_matrix(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let trace = m[0][0] + m[1][1] + m[2][2];
    let cos_t = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_t.acos();
    let axis_raw = [
        m[2][1] - m[1][2],
        m[0][2] - m[2][0],
        m[1][0] - m[0][1],
    ];
    if theta < 1e-9 {
        // log(R) ~ (R - R^T)/2 for small angles
        return [axis_raw[0] * 0.5, axis_raw[1] * 0.5, axis_raw[2] * 0.5];
    }
    let scale = theta / (2.0 * theta.sin());
    [axis_raw[0] * scale, axis_raw[1] * scale, axis_raw[2] * scale]
}

#[inline]
pub fn apply_rotation<S: Scalar>(r: &RotationMatrix<S>, p: &Point3<S>) -> Point3<S> {
    Point3 {
        x: r.m[0][0] * p.x + r.m[0][1] * p.y + r.m[0][2] * p.z,
        y: r.m[1][0] * p.x + r.m[1][1] * p.y + r.m[1][2] * p.z,
        z: r.m[2][0] * p.x + r.m[2][1] * p.y + r.m[2][2] * p.z,
    }
}

/// `R x + t` with a precomputed rotation matrix. The warping pipeline builds
/// each component's rotation once per step and reuses it across pixels.
#[inline]
pub fn apply_with_rotation<S: Scalar>(
    r: &RotationMatrix<S>,
    translation: &[S; 3],
    p: &Point3<S>,
) -> Point3<S> {
    let rotated = apply_rotation(r, p);
    Point3 {
        x: rotated.x + translation[0],
        y: rotated.y + translation[1],
        z: rotated.z + translation[2],
    }
}

/// `R x + t`, recomputing the rotation from the axis-angle vector.
pub fn apply_transform_s<S: Scalar>(t: &RigidTransform<S>, p: &Point3<S>) -> Point3<S> {
    let r = rotation_of_s(&t.axis_angle);
    apply_with_rotation(&r, &t.translation, p)
}

pub fn apply_transform(t: &RigidTransform<f64>, p: &Point3<f64>) -> Point3<f64> {
    apply_transform_s(t, p)
}

/// Backprojects a pixel to the camera-frame 3D point
/// `((u-cx)/fx * d, (v-cy)/fy * d, d)`. The pixel is data, the depth may be
/// a tape variable.
#[inline]
pub fn backproject_s<S: Scalar>(u: f64, v: f64, depth: S, intr: &CameraIntrinsics) -> Point3<S> {
    let dir_x = (u - intr.cx) / intr.fx;
    let dir_y = (v - intr.cy) / intr.fy;
    Point3 {
        x: depth * dir_x,
        y: depth * dir_y,
        z: depth,
    }
}

/// Concrete backprojection; rejects non-positive depth.
pub fn backproject(p: PixelCoord, depth: f64, intr: &CameraIntrinsics) -> Result<Point3> {
    if !(depth > 0.0) {
        return Err(Error::Domain(format!("backproject requires depth > 0, got {depth}")));
    }
    Ok(backproject_s(p.u, p.v, depth, intr))
}

/// Outcome of a perspective projection.
#[derive(Clone, Copy, Debug)]
pub enum Projection<S = f64> {
    Valid(PixelCoord<S>),
    /// z at or below [`EPS_Z`]; the pixel is flagged instead of raising an
    /// error so optimization can continue past transient bad geometry.
    BehindCamera,
}

impl<S> Projection<S> {
    pub fn valid(self) -> Option<PixelCoord<S>> {
        match self {
            Projection::Valid(p) => Some(p),
            Projection::BehindCamera => None,
        }
    }
}

/// Perspective projection with explicit homogeneous divide:
/// `u = (x/z) fx + cx`, `v = (y/z) fy + cy`.
#[inline]
pub fn project_s<S: Scalar>(p: &Point3<S>, intr: &CameraIntrinsics) -> Projection<S> {
    if p.z.value() <= EPS_Z {
        return Projection::BehindCamera;
    }
    Projection::Valid(PixelCoord {
        u: p.x / p.z * intr.fx + intr.cx,
        v: p.y / p.z * intr.fy + intr.cy,
    })
}

pub fn project(p: &Point3<f64>, intr: &CameraIntrinsics) -> Projection<f64> {
    project_s(p, intr)
}

/// Decodes a raw 6-vector into a pose: both the axis-angle and translation
/// halves are scaled by 0.01. The raw vector is what the optimizer owns, so
/// this scaling sits directly on the gradient path.
pub const POSE_SCALE: f64 = 0.01;

pub fn decode_pose_s<S: Scalar>(raw: &[S; 6]) -> RigidTransform<S> {
    RigidTransform {
        axis_angle: [raw[0] * POSE_SCALE, raw[1] * POSE_SCALE, raw[2] * POSE_SCALE],
        translation: [raw[3] * POSE_SCALE, raw[4] * POSE_SCALE, raw[5] * POSE_SCALE],
    }
}

pub fn decode_pose(raw: &[f64; 6]) -> Result<RigidTransform<f64>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("pose vector must be finite".into()));
    }
    Ok(decode_pose_s(raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Var};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn intr(fx: f64, fy: f64, cx: f64, cy: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(fx, fy, cx, cy).unwrap()
    }

    #[test]
    fn backproject_identity_intrinsics() {
        let k = intr(1.0, 1.0, 0.0, 0.0);
        let p = backproject(PixelCoord { u: 2.0, v: 3.0 }, 2.0, &k).unwrap();
        assert_eq!((p.x, p.y, p.z), (4.0, 6.0, 2.0));
    }

    #[test]
    fn backproject_principal_point_is_optical_axis() {
        let k = intr(123.0, 77.0, 31.5, 23.5);
        let p = backproject(PixelCoord { u: 31.5, v: 23.5 }, 5.0, &k).unwrap();
        assert_eq!((p.x, p.y, p.z), (0.0, 0.0, 5.0));
    }

    #[test]
    fn backproject_hand_case() {
        let k = intr(100.0, 50.0, 320.0, 96.0);
        let p = backproject(PixelCoord { u: 420.0, v: 146.0 }, 10.0, &k).unwrap();
        assert!((p.x - 10.0).abs() < 1e-12);
        assert!((p.y - 10.0).abs() < 1e-12);
        assert_eq!(p.z, 10.0);
    }

    #[test]
    fn backproject_rejects_nonpositive_depth() {
        let k = intr(1.0, 1.0, 0.0, 0.0);
        assert!(backproject(PixelCoord { u: 0.0, v: 0.0 }, 0.0, &k).is_err());
        assert!(backproject(PixelCoord { u: 0.0, v: 0.0 }, -2.0, &k).is_err());
    }

    #[test]
    fn project_inverts_backproject_example() {
        let k = intr(1.0, 1.0, 0.0, 0.0);
        let p = project(&Point3 { x: 4.0, y: 6.0, z: 2.0 }, &k).valid().unwrap();
        assert_eq!((p.u, p.v), (2.0, 3.0));

        let k2 = intr(100.0, 50.0, 320.0, 96.0);
        let q = project(&Point3 { x: 10.0, y: 10.0, z: 10.0 }, &k2).valid().unwrap();
        assert!((q.u - 420.0).abs() < 1e-12);
        assert!((q.v - 146.0).abs() < 1e-12);
    }

    #[test]
    fn project_flags_behind_camera() {
        let k = intr(1.0, 1.0, 0.0, 0.0);
        assert!(project(&Point3 { x: 0.0, y: 0.0, z: 0.0 }, &k).valid().is_none());
        assert!(project(&Point3 { x: 0.0, y: 0.0, z: -1.0 }, &k).valid().is_none());
    }

    #[test]
    fn rotation_zero_is_identity() {
        let r = rotation_of(&RigidTransform::identity());
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(r.m[i][j], expect);
            }
        }
    }

    #[test]
    fn rotation_quarter_turn_about_x() {
        let t = RigidTransform::new([PI / 2.0, 0.0, 0.0], [0.0; 3]);
        let r = rotation_of(&t);
        let p = apply_rotation(&r, &Point3 { x: 0.0, y: 1.0, z: 0.0 });
        assert!(p.x.abs() < 1e-15);
        assert!(p.y.abs() < 1e-15);
        assert!((p.z - 1.0).abs() < 1e-15);
    }

    fn orthonormality_error(r: &RotationMatrix<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r.m[k][i] * r.m[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        let det = r.m[0][0] * (r.m[1][1] * r.m[2][2] - r.m[1][2] * r.m[2][1])
            - r.m[0][1] * (r.m[1][0] * r.m[2][2] - r.m[1][2] * r.m[2][0])
            + r.m[0][2] * (r.m[1][0] * r.m[2][1] - r.m[1][1] * r.m[2][0]);
        worst.max((det - 1.0).abs())
    }

    #[test]
    fn rotation_orthonormal_hand_case() {
        let r = rotation_of(&RigidTransform::new([0.1, 0.2, 0.3], [0.0; 3]));
        assert!(orthonormality_error(&r) < 1e-12);
    }

    #[test]
    fn apply_transform_cases() {
        let id = RigidTransform::identity();
        let p = Point3 { x: 1.0, y: -2.0, z: 3.0 };
        assert_eq!(apply_transform(&id, &p), p);

        let tz = RigidTransform::new([0.0; 3], [0.0, 0.0, -1.0]);
        let q = apply_transform(&tz, &Point3 { x: 0.0, y: 0.0, z: 5.0 });
        assert_eq!((q.x, q.y, q.z), (0.0, 0.0, 4.0));

        let combo = RigidTransform::new([PI / 2.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        let r = apply_transform(&combo, &Point3 { x: 0.0, y: 1.0, z: 0.0 });
        assert!((r.x - 1.0).abs() < 1e-15);
        assert!(r.y.abs() < 1e-15);
        assert!((r.z - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decode_pose_cases() {
        let id = decode_pose(&[0.0; 6]).unwrap();
        assert_eq!(id, RigidTransform::identity());

        let t = decode_pose(&[0.0, 0.0, 0.0, 100.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.translation, [1.0, 0.0, 0.0]);

        let r = decode_pose(&[100.0 * PI / 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = apply_transform(&r, &Point3 { x: 0.0, y: 1.0, z: 0.0 });
        assert!(p.y.abs() < 1e-12);
        assert!((p.z - 1.0).abs() < 1e-12);

        assert!(decode_pose(&[f64::INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn geometry_ops_pass_grad_check() {
        // Depth through backproject-transform-project, at a smooth point.
        let f = crate::autodiff::program(|_, v: &[Var<'_>]| {
            let k = CameraIntrinsics::new(60.0, 55.0, 31.5, 23.5).unwrap();
            let x = backproject_s(10.3, 7.7, v[0], &k);
            let t = RigidTransform {
                axis_angle: [v[1], v[2], v[3]],
                translation: [v[4], v[5], v[6]],
            };
            let moved = apply_transform_s(&t, &x);
            match project_s(&moved, &k) {
                Projection::Valid(p) => p.u * 0.25 + p.v * 0.5,
                Projection::BehindCamera => unreachable!(),
            }
        });
        let inputs = [4.2, 0.03, -0.05, 0.02, 0.11, -0.04, 0.08];
        let report = grad_check(f, &inputs, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        // Through the Rodrigues Taylor branch at the identity.
        let g = crate::autodiff::program(|_, v: &[Var<'_>]| {
            let r = rotation_of_s(&[v[0], v[1], v[2]]);
            let p = apply_rotation(&r, &Point3 {
                x: v[0].lift(0.3),
                y: v[0].lift(-0.9),
                z: v[0].lift(1.4),
            });
            p.x + p.y * 2.0 + p.z * 0.5
        });
        let report = grad_check(g, &[0.0, 0.0, 0.0], 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn compose_matches_sequential_application() {
        let a = RigidTransform::new([0.1, -0.2, 0.05], [0.3, 0.1, -0.2]);
        let b = RigidTransform::new([-0.04, 0.15, 0.2], [0.1, -0.3, 0.05]);
        let ab = a.compose(&b);
        let p = Point3 { x: 0.4, y: -1.2, z: 2.5 };
        let seq = apply_transform(&a, &apply_transform(&b, &p));
        let direct = apply_transform(&ab, &p);
        assert!(seq.dist(&direct) < 1e-12);
    }

    proptest! {
        #[test]
        fn prop_project_backproject_roundtrip(
            u in -50.0f64..700.0,
            v in -30.0f64..400.0,
            d in 0.05f64..500.0,
        ) {
            let k = intr(95.0, 88.0, 320.0, 96.0);
            let x = backproject(PixelCoord { u, v }, d, &k).unwrap();
            let p = project(&x, &k).valid().unwrap();
            prop_assert!((p.u - u).abs() < 1e-10);
            prop_assert!((p.v - v).abs() < 1e-10);
        }

        #[test]
        fn prop_rotation_orthonormal(
            x in -3.0f64..3.0,
            y in -3.0f64..3.0,
            z in -3.0f64..3.0,
            scale in prop::sample::select(vec![1.0, 1e-2, 1e-6, 1e-9, 0.0]),
        ) {
            let r = rotation_of(&RigidTransform::new([x * scale, y * scale, z * scale], [0.0; 3]));
            prop_assert!(orthonormality_error(&r) < 1e-9);
        }

        #[test]
        fn prop_transform_is_isometry(
            aa in prop::array::uniform3(-2.0f64..2.0),
            t in prop::array::uniform3(-5.0f64..5.0),
            p in prop::array::uniform3(-10.0f64..10.0),
            q in prop::array::uniform3(-10.0f64..10.0),
        ) {
            let tf = RigidTransform::new(aa, t);
            let pa = Point3 { x: p[0], y: p[1], z: p[2] };
            let pb = Point3 { x: q[0], y: q[1], z: q[2] };
            let before = pa.dist(&pb);
            let after = apply_transform(&tf, &pa).dist(&apply_transform(&tf, &pb));
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
