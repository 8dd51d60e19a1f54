//! SE(3) poses, twists, the spatial motion transform and the
//! Moore-Penrose pseudo-inverse.
//!
//! Conventions used throughout the crate:
//! * `T_{a,b}` maps coordinates of frame `b` into frame `a`.
//! * Twists are stacked as 6-vectors with the linear part first.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Rigid transform: orthonormal rotation plus translation in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr", from = "PoseRepr")]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Row-major JSON representation shared with the annotation file schema.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let r = &p.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        Pose {
            rotation: Matrix3::new(
                r.rotation[0][0],
                r.rotation[0][1],
                r.rotation[0][2],
                r.rotation[1][0],
                r.rotation[1][1],
                r.rotation[1][2],
                r.rotation[2][0],
                r.rotation[2][1],
                r.rotation[2][2],
            ),
            translation: Vector3::new(r.translation[0], r.translation[1], r.translation[2]),
        }
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Pose {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    /// `a.compose(b)` returns `a * b`, i.e. `T_{x,z}` from `T_{x,y}` and `T_{y,z}`.
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

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Nearest orthonormal rotation via polar decomposition (U V^T from the SVD).
    /// Used to bound drift when composing long displacement chains.
    pub fn orthonormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            // flip the weakest singular direction to stay in SO(3)
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Pose {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Checks the SO(3) invariants within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e < tol
            && (self.rotation.determinant() - 1.0).abs() < tol
            && self.translation.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Velocity screw of a frame, expressed in that frame unless stated otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            linear: Vector3::new(v[0], v[1], v[2]),
            angular: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }
}

/// 6x6 spatial motion transform mapping twists between frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityTransform {
    pub matrix: Matrix6<f64>,
}

impl VelocityTransform {
    pub fn apply(&self, twist: &Twist) -> Twist {
        Twist::from_vector(&(self.matrix * twist.to_vector()))
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
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

/// Propagates an initial camera-to-object pose through a list of
/// frame-to-frame camera displacements.
///
/// `initial` is the pose of the object in the first camera frame and
/// `displacements[i]` relates camera frame `i+1` to camera frame `i+2`.
/// Returns the object pose in every camera frame, element 0 being `initial`.
pub fn chain_displacements(initial: &Pose, displacements: &[Pose]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(displacements.len() + 1);
    out.push(*initial);
    let mut cumulative = Pose::identity();
    for d in displacements {
        cumulative = cumulative.compose(d).orthonormalized();
        out.push(cumulative.inverse().compose(initial));
    }
    out
}

/// Spatial motion transform built from `T_{c,e}` (effector frame expressed
/// in the camera frame): block form `[[R, [t]x R], [0, R]]`.
pub fn velocity_transform(camera_from_effector: &Pose) -> VelocityTransform {
    let r = camera_from_effector.rotation;
    let tr = skew(&camera_from_effector.translation) * r;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    VelocityTransform { matrix: m }
}

/// Default relative singular-value cutoff for [`pseudo_inverse`].
pub const PINV_DEFAULT_TOLERANCE: f64 = 1e-10;

/// Moore-Penrose pseudo-inverse via SVD truncation. Singular values below
/// `tolerance * sigma_max` are treated as zero, so rank-deficient inputs
/// never fail.
pub fn pseudo_inverse(m: &DMatrix<f64>, tolerance: f64) -> DMatrix<f64> {
    pinv_filtered(m, |sigma, sigma_max| {
        if sigma > tolerance * sigma_max {
            1.0 / sigma
        } else {
            0.0
        }
    })
}

/// Damped least-squares inverse: each singular value is mapped to
/// `sigma / (sigma^2 + damping^2)`, bounding the gain near singularities.
pub fn pseudo_inverse_damped(m: &DMatrix<f64>, damping: f64) -> DMatrix<f64> {
    if damping <= 0.0 {
        return pseudo_inverse(m, PINV_DEFAULT_TOLERANCE);
    }
    pinv_filtered(m, |sigma, _| sigma / (sigma * sigma + damping * damping))
}

fn pinv_filtered<F: Fn(f64, f64) -> f64>(m: &DMatrix<f64>, filter: F) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let mut out = DMatrix::zeros(cols, rows);
    if sigma_max == 0.0 {
        return out;
    }
    for (i, &sigma) in svd.singular_values.iter().enumerate() {
        let g = filter(sigma, sigma_max);
        if g != 0.0 {
            // out += g * v_i * u_i^T
            let vi = v_t.row(i).transpose();
            let ui = u.column(i);
            out += g * vi * ui.transpose();
        }
    }
    out
}
