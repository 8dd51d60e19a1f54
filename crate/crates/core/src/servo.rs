//! The wrist controllers: standard image-based visual servoing over both
//! joints (s-IBVS) and the proportional-and-partitioned variant (pp-IBVS,
//! flexion-extension via IBVS, pronation-supination via a sign-forced
//! proportional law), plus the episode simulator, convergence detection
//! and the naturalness verdict.

use crate::geometry::{
    pseudo_inverse, pseudo_inverse_damped, velocity_transform, Pose, PINV_DEFAULT_TOLERANCE,
};
use crate::vision::{
    merge_object_mask, render_part_masks, select_nearest_to_center, to_feature, CameraIntrinsics,
    FeaturePoint, SceneObject, VisionError, DEFAULT_ADJACENCY_PX,
};
use crate::wrist::{
    effector_in_camera, forward_kinematics, joint_jacobian, palm_normal_world, JointSelector,
    JointState, JointVelocity, WristError, WristParams,
};
use nalgebra::{DMatrix, Matrix2x6, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ServoError {
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Wrist(#[from] WristError),
}

/// 2x6 point-feature interaction matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InteractionMatrix {
    pub matrix: Matrix2x6<f64>,
}

/// Which arm the prosthesis is fitted to; fixes which pronation-supination
/// direction counts as rotating inward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArmSide {
    RightArm,
    LeftArm,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Visual servoing gain (1/s).
    pub lambda: f64,
    /// Proportional gain for the pronation-supination law (1/s).
    pub lambda_wps: f64,
    /// Convergence threshold on the feature error norm, normalized units.
    pub convergence_eps: f64,
    /// Consecutive below-threshold steps required to declare convergence.
    pub convergence_hold: u32,
    pub max_iterations: u32,
    /// Control period in seconds.
    pub dt: f64,
    /// Damped-least-squares parameter; 0 disables damping.
    pub damping: f64,
    /// Per-joint speed ceiling in rad/s; commanded rates are scaled down
    /// uniformly to respect it. Guards against near-singular inversions.
    pub max_joint_speed: f64,
    pub arm_side: ArmSide,
}

impl ControllerConfig {
    /// Uniformly rescales a commanded rate to the configured ceiling.
    pub fn limit_speed(&self, qdot: &JointVelocity) -> JointVelocity {
        let peak = qdot.wfe.abs().max(qdot.wps.abs());
        if peak <= self.max_joint_speed || !self.max_joint_speed.is_finite() {
            *qdot
        } else {
            let s = self.max_joint_speed / peak;
            JointVelocity { wfe: qdot.wfe * s, wps: qdot.wps * s }
        }
    }
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            lambda: 0.8,
            lambda_wps: 2.0,
            convergence_eps: 0.01,
            convergence_hold: 5,
            max_iterations: 1500,
            dt: 1.0 / 15.0,
            damping: 0.0,
            max_joint_speed: 4.0,
            arm_side: ArmSide::RightArm,
        }
    }
}

/// Feature error `e(t) = s(t) - s*` in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureError {
    pub e: [f64; 2],
}

impl FeatureError {
    pub fn between(current: &FeaturePoint, target: &FeaturePoint) -> Self {
        FeatureError {
            e: [current.x - target.x, current.y - target.y],
        }
    }

    pub fn norm(&self) -> f64 {
        (self.e[0] * self.e[0] + self.e[1] * self.e[1]).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerKind {
    Sibvs,
    Ppibvs,
}

impl std::str::FromStr for ControllerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sibvs" | "s-ibvs" => Ok(ControllerKind::Sibvs),
            "ppibvs" | "pp-ibvs" => Ok(ControllerKind::Ppibvs),
            other => Err(format!("unknown controller '{other}'")),
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControllerKind::Sibvs => write!(f, "s-IBVS"),
            ControllerKind::Ppibvs => write!(f, "pp-IBVS"),
        }
    }
}

/// Classical point-feature interaction matrix in normalized coordinates:
///
/// ```text
/// [ -1/Z   0    x/Z    x*y    -(1+x^2)   y ]
/// [  0   -1/Z   y/Z   1+y^2    -x*y     -x ]
/// ```
pub fn interaction_matrix_point(f: &FeaturePoint) -> Result<InteractionMatrix, VisionError> {
    if f.depth <= 0.0 {
        return Err(VisionError::NonPositiveDepth { depth: f.depth });
    }
    let (x, y, z) = (f.x, f.y, f.depth);
    Ok(InteractionMatrix {
        matrix: Matrix2x6::new(
            -1.0 / z,
            0.0,
            x / z,
            x * y,
            -(1.0 + x * x),
            y,
            0.0,
            -1.0 / z,
            y / z,
            1.0 + y * y,
            -x * y,
            -x,
        ),
    })
}

fn ibvs_feature_map(
    f: &FeaturePoint,
    q: &JointState,
    params: &WristParams,
    joints: JointSelector,
) -> Result<DMatrix<f64>, ServoError> {
    let l = interaction_matrix_point(f)?;
    let v = velocity_transform(&effector_in_camera(params));
    let j = joint_jacobian(params, q, joints)?;
    let lv = l.matrix * v.matrix;
    let mut m = DMatrix::zeros(2, joints.count());
    for c in 0..joints.count() {
        for r in 0..2 {
            let mut acc = 0.0;
            for k in 0..6 {
                acc += lv[(r, k)] * j.matrix[(k, c)];
            }
            m[(r, c)] = acc;
        }
    }
    Ok(m)
}

fn inverted(m: &DMatrix<f64>, cfg: &ControllerConfig) -> DMatrix<f64> {
    if cfg.damping > 0.0 {
        pseudo_inverse_damped(m, cfg.damping)
    } else {
        pseudo_inverse(m, PINV_DEFAULT_TOLERANCE)
    }
}

/// Standard IBVS step over both joints:
/// `qdot = -lambda * (L V J)^+ * (s - s*)`.
pub fn sibvs_step(
    f: &FeaturePoint,
    target: &FeaturePoint,
    q: &JointState,
    params: &WristParams,
    cfg: &ControllerConfig,
) -> Result<JointVelocity, ServoError> {
    let m = ibvs_feature_map(f, q, params, JointSelector::Both)?;
    let pinv = inverted(&m, cfg);
    let e = Vector2::new(f.x - target.x, f.y - target.y);
    let qdot = -cfg.lambda * (pinv * DMatrix::from_column_slice(2, 1, e.as_slice()));
    Ok(JointVelocity {
        wfe: qdot[(0, 0)],
        wps: qdot[(1, 0)],
    })
}

/// Sign of the inward pronation-supination rotation for a centroid on the
/// given side of the vertical image centerline.
fn inward_wps_sign(arm: ArmSide, centroid_u: f64, cx: f64) -> f64 {
    if centroid_u == cx {
        return 0.0;
    }
    let base = if centroid_u > cx { 1.0 } else { -1.0 };
    match arm {
        ArmSide::RightArm => base,
        ArmSide::LeftArm => -base,
    }
}

/// Partitioned step: flexion-extension from IBVS with the
/// pronation-supination column removed, pronation-supination from the
/// proportional law `qdot_wps = sign * lambda_wps * |e_wps|` where the
/// sign depends only on which side of the image centerline the centroid
/// lies on.
pub fn ppibvs_step(
    f: &FeaturePoint,
    target: &FeaturePoint,
    q: &JointState,
    params: &WristParams,
    cfg: &ControllerConfig,
    centroid_px: (f64, f64),
    intrinsics: &CameraIntrinsics,
) -> Result<JointVelocity, ServoError> {
    let m = ibvs_feature_map(f, q, params, JointSelector::WfeOnly)?;
    let pinv = inverted(&m, cfg);
    let e = Vector2::new(f.x - target.x, f.y - target.y);
    let qdot_wfe = -cfg.lambda * (pinv[(0, 0)] * e.x + pinv[(0, 1)] * e.y);

    // horizontal offset between image center and centroid, normalized by fx
    let e_wps = (intrinsics.cx - centroid_px.0) / intrinsics.fx;
    let sign = inward_wps_sign(cfg.arm_side, centroid_px.0, intrinsics.cx);
    let qdot_wps = sign * cfg.lambda_wps * e_wps.abs();
    Ok(JointVelocity {
        wfe: qdot_wfe,
        wps: qdot_wps,
    })
}

/// True when the palm normal points toward the object within `threshold`
/// (strictly positive projection at the default 90 degrees).
pub fn naturalness_with_threshold(
    params: &WristParams,
    q_final: &JointState,
    hand_pose: &Pose,
    object_centroid_world: &Vector3<f64>,
    threshold: f64,
) -> bool {
    let normal_base = match palm_normal_world(params, q_final) {
        Ok(n) => n,
        Err(_) => return false,
    };
    let normal = hand_pose.rotate_vector(&normal_base);
    let to_object = object_centroid_world - hand_pose.translation;
    if to_object.norm() == 0.0 {
        return false;
    }
    normal.dot(&to_object.normalize()) > threshold.cos()
}

pub fn naturalness(
    params: &WristParams,
    q_final: &JointState,
    hand_pose: &Pose,
    object_centroid_world: &Vector3<f64>,
) -> bool {
    naturalness_with_threshold(
        params,
        q_final,
        hand_pose,
        object_centroid_world,
        std::f64::consts::FRAC_PI_2,
    )
}

/// Per-run record of a simulated servoing episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub controller: ControllerKind,
    pub converged: bool,
    pub iterations: u32,
    pub final_error_norm: f64,
    pub natural: bool,
    /// One `(q, s)` entry per step, starting with the initial state.
    pub trajectory: Vec<(JointState, FeaturePoint)>,
    /// A joint-limit clamp fired during integration.
    pub limit_saturated: bool,
    /// The object left the field of view before convergence.
    pub lost_sight: bool,
}

/// Runs one closed-loop episode with the arm fixed in space and the wrist
/// joints driven by the chosen controller.
///
/// Per tick: render part masks, merge them into the full object mask,
/// select the region nearest the image center, convert its centroid to
/// the current feature, step the controller and integrate with clamping
/// at the joint limits. Stops once the error norm stays below
/// `convergence_eps` for `convergence_hold` consecutive steps or
/// `max_iterations` is reached.
pub fn simulate_episode(
    controller: ControllerKind,
    scene: &SceneObject,
    hand_pose: &Pose,
    q0: &JointState,
    params: &WristParams,
    intrinsics: &CameraIntrinsics,
    cfg: &ControllerConfig,
) -> Result<EpisodeResult, ServoError> {
    let mut q = *q0;
    params.check_limits(&q)?;
    let target = FeaturePoint { x: 0.0, y: 0.0, depth: 1.0 };
    let observe = |q: &JointState| -> Result<(FeaturePoint, (f64, f64)), ServoError> {
        let camera_world = hand_pose.compose(&forward_kinematics(params, q)?);
        let masks = render_part_masks(intrinsics, &camera_world, scene)?;
        let regions = merge_object_mask(&masks, DEFAULT_ADJACENCY_PX);
        let region = select_nearest_to_center(&regions, intrinsics)?;
        let feature = to_feature(intrinsics, region.centroid, region.mean_depth)?;
        Ok((feature, region.centroid))
    };

    // a failure on the very first observation rejects the episode
    let (mut feature, mut centroid) = observe(&q)?;

    let mut trajectory = vec![(q, feature)];
    let mut iterations = 0u32;
    let mut hold = 0u32;
    let mut converged = false;
    let mut limit_saturated = false;
    let mut lost_sight = false;
    let mut error = FeatureError::between(&feature, &target);

    loop {
        if error.norm() < cfg.convergence_eps {
            hold += 1;
            if hold >= cfg.convergence_hold {
                converged = true;
                break;
            }
        } else {
            hold = 0;
        }
        if iterations >= cfg.max_iterations {
            break;
        }
        let qdot = match controller {
            ControllerKind::Sibvs => sibvs_step(&feature, &target, &q, params, cfg)?,
            ControllerKind::Ppibvs => {
                ppibvs_step(&feature, &target, &q, params, cfg, centroid, intrinsics)?
            }
        };
        let qdot = cfg.limit_speed(&qdot);
        let wrapped = params.wrap(&JointState {
            wfe: q.wfe + qdot.wfe * cfg.dt,
            wps: q.wps + qdot.wps * cfg.dt,
        });
        q = params.clamp(&wrapped);
        if q != wrapped {
            limit_saturated = true;
        }
        iterations += 1;
        match observe(&q) {
            Ok((f, c)) => {
                feature = f;
                centroid = c;
            }
            Err(ServoError::Vision(VisionError::NothingVisible)) => {
                lost_sight = true;
                trajectory.push((q, feature));
                break;
            }
            Err(e) => return Err(e),
        }
        trajectory.push((q, feature));
        error = FeatureError::between(&feature, &target);
    }

    let natural = naturalness(params, &q, hand_pose, &scene.centroid_world());
    Ok(EpisodeResult {
        controller,
        converged,
        iterations,
        final_error_norm: error.norm(),
        natural,
        trajectory,
        limit_saturated,
        lost_sight,
    })
}

/// Writes a trajectory as CSV, one row per step.
pub fn write_trace_csv<W: std::io::Write>(
    w: &mut W,
    result: &EpisodeResult,
) -> std::io::Result<()> {
    writeln!(w, "iteration,q_wfe,q_wps,feature_x,feature_y,error_norm")?;
    for (i, (q, f)) in result.trajectory.iter().enumerate() {
        let norm = (f.x * f.x + f.y * f.y).sqrt();
        writeln!(w, "{},{},{},{},{},{}", i, q.wfe, q.wps, f.x, f.y, norm)?;
    }
    Ok(())
}
