//! Kinematic model of a two-DoF prosthetic wrist: flexion-extension (WFE)
//! and pronation-supination (WPS) revolute joints, orthogonal and
//! intersecting at the wrist point, with a tilted palm camera.
//!
//! Frames:
//! * base — forearm frame, z axis along the forearm (the WPS axis);
//! * effector — at the wrist point, reached as `Rz(q_wps) * Rx(q_wfe)`,
//!   so the WFE axis is the effector x axis;
//! * camera — mounted at `camera_offset` in the effector frame, optical
//!   axis (camera z) tilted by `camera_tilt` about the WFE axis.

use crate::geometry::{rot_x, rot_z, Pose};
use nalgebra::{Matrix6xX, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WristError {
    #[error("joint state ({wfe}, {wps}) rad outside configured limits")]
    JointLimitViolation { wfe: f64, wps: f64 },
}

/// Wrist geometry. Angles in radians, lengths in meters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WristParams {
    /// Angle between the camera optical axis and the WPS rotational axis.
    pub camera_tilt: f64,
    /// Camera origin relative to the wrist joint intersection point,
    /// in the effector frame.
    pub camera_offset: Vector3<f64>,
    pub wfe_limits: [f64; 2],
    pub wps_limits: [f64; 2],
    /// Outward palm direction in the effector frame.
    pub palm_normal_local: Vector3<f64>,
}

impl Default for WristParams {
    fn default() -> Self {
        WristParams {
            camera_tilt: 16f64.to_radians(),
            camera_offset: Vector3::new(0.0, 0.02, 0.06),
            wfe_limits: [-45f64.to_radians(), 75f64.to_radians()],
            wps_limits: [-180f64.to_radians(), 180f64.to_radians()],
            palm_normal_local: Vector3::new(0.0, 0.0, 1.0),
        }
    }
}

impl WristParams {
    /// Same geometry with joint limits disabled.
    pub fn without_limits(mut self) -> Self {
        self.wfe_limits = [f64::NEG_INFINITY, f64::INFINITY];
        self.wps_limits = [f64::NEG_INFINITY, f64::INFINITY];
        self
    }

    pub fn check_limits(&self, q: &JointState) -> Result<(), WristError> {
        let in_range = |x: f64, lim: &[f64; 2]| x >= lim[0] && x <= lim[1];
        if in_range(q.wfe, &self.wfe_limits) && in_range(q.wps, &self.wps_limits) {
            Ok(())
        } else {
            Err(WristError::JointLimitViolation { wfe: q.wfe, wps: q.wps })
        }
    }

    /// Wraps joints whose limit range spans the full circle back into
    /// range; such joints have no mechanical end stop, so positions are
    /// periodic rather than saturating.
    pub fn wrap(&self, q: &JointState) -> JointState {
        let wrap_one = |x: f64, lim: &[f64; 2]| {
            let span = lim[1] - lim[0];
            if span.is_finite() && span >= std::f64::consts::TAU - 1e-9 {
                let w = (x - lim[0]).rem_euclid(std::f64::consts::TAU) + lim[0];
                if w > lim[1] {
                    w - std::f64::consts::TAU
                } else {
                    w
                }
            } else {
                x
            }
        };
        JointState {
            wfe: wrap_one(q.wfe, &self.wfe_limits),
            wps: wrap_one(q.wps, &self.wps_limits),
        }
    }

    /// Wraps periodic joints, then clamps what remains out of range.
    pub fn clamp(&self, q: &JointState) -> JointState {
        let q = self.wrap(q);
        JointState {
            wfe: q.wfe.clamp(self.wfe_limits[0], self.wfe_limits[1]),
            wps: q.wps.clamp(self.wps_limits[0], self.wps_limits[1]),
        }
    }
}

/// Wrist configuration `q = (q_wfe, q_wps)` in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub wfe: f64,
    pub wps: f64,
}

impl JointState {
    pub fn new(wfe: f64, wps: f64) -> Self {
        JointState { wfe, wps }
    }

    pub fn zero() -> Self {
        JointState { wfe: 0.0, wps: 0.0 }
    }
}

/// Joint rates in rad/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointVelocity {
    pub wfe: f64,
    pub wps: f64,
}

impl JointVelocity {
    pub fn zero() -> Self {
        JointVelocity { wfe: 0.0, wps: 0.0 }
    }
}

/// Which joints a controller drives; columns keep the (WFE, WPS) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointSelector {
    Both,
    WfeOnly,
    WpsOnly,
}

impl JointSelector {
    pub fn count(&self) -> usize {
        match self {
            JointSelector::Both => 2,
            _ => 1,
        }
    }
}

/// 6xn robot Jacobian expressed in the effector frame, linear rows first.
#[derive(Clone, Debug, PartialEq)]
pub struct JointJacobian {
    pub matrix: Matrix6xX<f64>,
}

/// Pose of the effector (wrist) frame in the forearm base frame.
pub fn wrist_pose(_params: &WristParams, q: &JointState) -> Pose {
    Pose::from_rotation(rot_z(q.wps) * rot_x(q.wfe))
}

/// Constant mount transform `T_{e,c}`: camera frame in the effector frame.
pub fn camera_mount(params: &WristParams) -> Pose {
    Pose::new(rot_x(params.camera_tilt), params.camera_offset)
}

/// `T_{c,e}`: effector frame expressed in the camera frame, the pose the
/// spatial motion transform is built from.
pub fn effector_in_camera(params: &WristParams) -> Pose {
    camera_mount(params).inverse()
}

/// Pose of the camera frame in the forearm base frame.
pub fn forward_kinematics(params: &WristParams, q: &JointState) -> Result<Pose, WristError> {
    params.check_limits(q)?;
    Ok(wrist_pose(params, q).compose(&camera_mount(params)))
}

/// Body Jacobian of the effector frame. Both joint axes pass through the
/// effector origin, so the linear rows are zero: the camera sees linear
/// motion only through the mount offset in the spatial motion transform.
pub fn joint_jacobian(
    params: &WristParams,
    q: &JointState,
    joints: JointSelector,
) -> Result<JointJacobian, WristError> {
    params.check_limits(q)?;
    let wfe_col = Vector6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    // WPS axis (base z) carried into the effector frame by Rx(-q_wfe)
    let wps_axis = rot_x(-q.wfe) * Vector3::new(0.0, 0.0, 1.0);
    let wps_col = Vector6::new(0.0, 0.0, 0.0, wps_axis.x, wps_axis.y, wps_axis.z);
    let cols: Vec<Vector6<f64>> = match joints {
        JointSelector::Both => vec![wfe_col, wps_col],
        JointSelector::WfeOnly => vec![wfe_col],
        JointSelector::WpsOnly => vec![wps_col],
    };
    Ok(JointJacobian {
        matrix: Matrix6xX::from_columns(&cols),
    })
}

/// Palm normal rotated into the forearm base frame.
pub fn palm_normal_world(params: &WristParams, q: &JointState) -> Result<Vector3<f64>, WristError> {
    params.check_limits(q)?;
    Ok(wrist_pose(params, q).rotate_vector(&params.palm_normal_local))
}
