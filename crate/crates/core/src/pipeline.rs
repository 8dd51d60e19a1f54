//! Three-phase shared-autonomy grasp pipeline: transport (visual servoing
//! on the merged object mask), rotation (wrist moved to the configuration
//! predicted from the selected part label) and grasping (finger commands
//! passed through to the user). Driven by abstract trigger events so a
//! session can be replayed from a log.

use crate::geometry::Pose;
use crate::servo::{ppibvs_step, ControllerConfig};
use crate::vision::{
    merge_object_mask, render_part_masks, select_nearest_to_center, to_feature, CameraIntrinsics,
    FeaturePoint, PartLabel, PartMask, SceneObject, DEFAULT_ADJACENCY_PX,
};
use crate::wrist::{forward_kinematics, palm_normal_world, JointState, JointVelocity, WristParams};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("every visible part is labeled no-grasp")]
    NoGraspablePart,
    #[error("no-grasp parts cannot seed a grasp plan")]
    NoGraspLabel,
    #[error("no in-limit wrist configuration aligns the palm within {best_deg:.1} degrees")]
    Unreachable { best_deg: f64 },
    #[error(transparent)]
    Servo(#[from] crate::servo::ServoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Transport,
    Rotation,
    Grasping,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerKind {
    ArmRaised,
    EmgRotationTrigger,
    EmgClose,
    EmgOpen,
    ArmLowered,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub t: f64,
    pub event: TriggerKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspPlan {
    pub selected_label: PartLabel,
    pub target_joints: JointState,
}

/// Output of one pipeline tick. Servo velocities and rotation-phase moves
/// are distinct so replay checks can tell them apart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Command {
    NoOp,
    /// Visual-servoing velocity, transport phase only.
    Servo { qdot: JointVelocity },
    /// Proportional position move toward the grasp target, rotation phase.
    RotationMove { qdot: JointVelocity },
    GraspPlanned { plan: GraspPlan },
    Finger { closing: bool },
}

/// Static context a pipeline session runs against.
#[derive(Clone, Debug)]
pub struct PipelineContext {
    pub params: WristParams,
    pub intrinsics: CameraIntrinsics,
    pub cfg: ControllerConfig,
    pub hand_pose: Pose,
    pub object_centroid_world: Vector3<f64>,
    /// Proportional gain of the rotation-phase move (1/s).
    pub rotation_gain: f64,
    /// Per-joint tolerance ending the rotation phase (radians).
    pub rotation_tolerance: f64,
    /// Ticks the last transport command is held after losing sight.
    pub grace_ticks: u32,
    pub adjacency_px: f64,
}

impl PipelineContext {
    pub fn new(
        params: WristParams,
        intrinsics: CameraIntrinsics,
        cfg: ControllerConfig,
        hand_pose: Pose,
        object_centroid_world: Vector3<f64>,
    ) -> Self {
        PipelineContext {
            params,
            intrinsics,
            cfg,
            hand_pose,
            object_centroid_world,
            rotation_gain: 4.0,
            rotation_tolerance: 5f64.to_radians(),
            grace_ticks: 10,
            adjacency_px: DEFAULT_ADJACENCY_PX,
        }
    }
}

/// The state machine. Pure over (state, event, tick inputs): identical
/// logs replay to identical command streams.
#[derive(Clone, Debug)]
pub struct Pipeline {
    phase: Phase,
    plan: Option<GraspPlan>,
    last_servo: Option<JointVelocity>,
    grace_left: u32,
    /// Set when sight was lost longer than the grace period.
    pub sight_lost_flag: bool,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self::new()
    }
}

impl Pipeline {
    pub fn new() -> Self {
        Pipeline {
            phase: Phase::Idle,
            plan: None,
            last_servo: None,
            grace_left: 0,
            sight_lost_flag: false,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn plan(&self) -> Option<&GraspPlan> {
        self.plan.as_ref()
    }

    /// Advances one tick. `masks` are the per-tick part masks from the
    /// provider (the simulator oracle here). Illegal events for the
    /// current phase are no-ops, never transitions.
    pub fn step(
        &mut self,
        event: Option<&TriggerEvent>,
        masks: &[PartMask],
        q: &JointState,
        ctx: &PipelineContext,
    ) -> Result<Command, PipelineError> {
        match self.phase {
            Phase::Idle => {
                if matches!(event.map(|e| e.event), Some(TriggerKind::ArmRaised)) {
                    self.phase = Phase::Transport;
                    self.grace_left = ctx.grace_ticks;
                    self.sight_lost_flag = false;
                }
                Ok(Command::NoOp)
            }
            Phase::Transport => {
                if matches!(event.map(|e| e.event), Some(TriggerKind::EmgRotationTrigger)) {
                    // rotation selection runs on individual part masks,
                    // never on merged regions
                    let graspable: Vec<PartMask> = masks
                        .iter()
                        .filter(|m| m.label != PartLabel::NoGrasp)
                        .cloned()
                        .collect();
                    if graspable.is_empty() {
                        return Err(PipelineError::NoGraspablePart);
                    }
                    let chosen = select_nearest_to_center(&graspable, &ctx.intrinsics)
                        .expect("non-empty");
                    let target = label_to_wrist_target(
                        chosen.label,
                        &ctx.hand_pose,
                        &ctx.object_centroid_world,
                        &ctx.params,
                    )?;
                    let plan = GraspPlan {
                        selected_label: chosen.label,
                        target_joints: target,
                    };
                    self.plan = Some(plan);
                    self.phase = Phase::Rotation;
                    return Ok(Command::GraspPlanned { plan });
                }
                // transport servoing always consumes merged-region centroids
                let regions = merge_object_mask(masks, ctx.adjacency_px);
                match select_nearest_to_center(&regions, &ctx.intrinsics) {
                    Ok(region) => {
                        let feature =
                            to_feature(&ctx.intrinsics, region.centroid, region.mean_depth)
                                .map_err(crate::servo::ServoError::from)?;
                        let target = FeaturePoint { x: 0.0, y: 0.0, depth: feature.depth };
                        let qdot = ppibvs_step(
                            &feature,
                            &target,
                            q,
                            &ctx.params,
                            &ctx.cfg,
                            region.centroid,
                            &ctx.intrinsics,
                        )?;
                        let qdot = ctx.cfg.limit_speed(&qdot);
                        self.last_servo = Some(qdot);
                        self.grace_left = ctx.grace_ticks;
                        Ok(Command::Servo { qdot })
                    }
                    Err(_) => {
                        // object out of frame: hold the last command for the
                        // grace period, then zero velocities and flag
                        if self.grace_left > 0 {
                            self.grace_left -= 1;
                            if let Some(qdot) = self.last_servo {
                                return Ok(Command::Servo { qdot });
                            }
                        } else {
                            self.sight_lost_flag = true;
                        }
                        Ok(Command::Servo { qdot: JointVelocity::zero() })
                    }
                }
            }
            Phase::Rotation => {
                let plan = self.plan.expect("rotation phase always has a plan");
                let err_wfe = plan.target_joints.wfe - q.wfe;
                let err_wps = plan.target_joints.wps - q.wps;
                if err_wfe.abs() <= ctx.rotation_tolerance
                    && err_wps.abs() <= ctx.rotation_tolerance
                {
                    self.phase = Phase::Grasping;
                    return Ok(Command::NoOp);
                }
                Ok(Command::RotationMove {
                    qdot: JointVelocity {
                        wfe: ctx.rotation_gain * err_wfe,
                        wps: ctx.rotation_gain * err_wps,
                    },
                })
            }
            Phase::Grasping => match event.map(|e| e.event) {
                Some(TriggerKind::EmgClose) => Ok(Command::Finger { closing: true }),
                Some(TriggerKind::EmgOpen) => Ok(Command::Finger { closing: false }),
                Some(TriggerKind::ArmLowered) => {
                    self.phase = Phase::Idle;
                    self.plan = None;
                    self.last_servo = None;
                    Ok(Command::NoOp)
                }
                _ => Ok(Command::NoOp),
            },
        }
    }
}

/// Maps a grasp label to the wrist configuration aligning the palm:
/// straight down for a top grasp, horizontal and toward the object for a
/// side grasp. Solved by a coarse grid over the two joints followed by
/// local refinement; deterministic.
pub fn label_to_wrist_target(
    label: PartLabel,
    hand_pose: &Pose,
    object_centroid_world: &Vector3<f64>,
    params: &WristParams,
) -> Result<JointState, PipelineError> {
    let desired = match label {
        PartLabel::NoGrasp => return Err(PipelineError::NoGraspLabel),
        PartLabel::TopGrasp => Vector3::new(0.0, 0.0, -1.0),
        PartLabel::SideGrasp => {
            let mut d = object_centroid_world - hand_pose.translation;
            d.z = 0.0;
            if d.norm() < 1e-9 {
                // hand directly above the object: any horizontal direction
                // qualifies; pick the hand-frame forward projection
                d = hand_pose.rotate_vector(&Vector3::new(0.0, 0.0, 1.0));
                d.z = 0.0;
                if d.norm() < 1e-9 {
                    d = Vector3::new(1.0, 0.0, 0.0);
                }
            }
            d.normalize()
        }
    };

    let misalignment = |q: &JointState| -> f64 {
        match palm_normal_world(params, q) {
            Ok(n) => {
                let world = hand_pose.rotate_vector(&n);
                world.dot(&desired).clamp(-1.0, 1.0).acos()
            }
            Err(_) => f64::INFINITY,
        }
    };

    // coarse grid
    let steps = 72usize;
    let mut best = JointState::zero();
    let mut best_err = f64::INFINITY;
    for i in 0..=steps {
        let wfe = params.wfe_limits[0]
            + (params.wfe_limits[1] - params.wfe_limits[0]) * i as f64 / steps as f64;
        for j in 0..=steps {
            let wps = params.wps_limits[0]
                + (params.wps_limits[1] - params.wps_limits[0]) * j as f64 / steps as f64;
            let q = JointState::new(wfe, wps);
            let e = misalignment(&q);
            if e < best_err {
                best_err = e;
                best = q;
            }
        }
    }
    // shrinking local refinement around the best grid cell
    let mut span_wfe = (params.wfe_limits[1] - params.wfe_limits[0]) / steps as f64;
    let mut span_wps = (params.wps_limits[1] - params.wps_limits[0]) / steps as f64;
    for _ in 0..20 {
        for di in -2i32..=2 {
            for dj in -2i32..=2 {
                let q = params.clamp(&JointState::new(
                    best.wfe + di as f64 * span_wfe / 2.0,
                    best.wps + dj as f64 * span_wps / 2.0,
                ));
                let e = misalignment(&q);
                if e < best_err {
                    best_err = e;
                    best = q;
                }
            }
        }
        span_wfe *= 0.5;
        span_wps *= 0.5;
    }

    if best_err > 25f64.to_radians() {
        return Err(PipelineError::Unreachable { best_deg: best_err.to_degrees() });
    }
    Ok(best)
}

/// One emitted record of a replayed session.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub phase: Phase,
    pub command: Command,
}

/// Replays an event log against the simulator at the configured tick
/// rate, integrating commanded velocities into the wrist state. Ends when
/// the pipeline returns to idle after a session or the log and motion are
/// exhausted.
pub fn replay_session(
    events: &[TriggerEvent],
    scene: &SceneObject,
    q0: &JointState,
    ctx: &PipelineContext,
    max_ticks: u32,
) -> Result<(Vec<TickRecord>, JointState), PipelineError> {
    let mut pipeline = Pipeline::new();
    let mut q = *q0;
    let mut records = Vec::new();
    let mut next_event = 0usize;
    let mut was_active = false;
    for tick in 0..max_ticks {
        let t = tick as f64 * ctx.cfg.dt;
        let event = if next_event < events.len() && events[next_event].t <= t {
            let e = events[next_event];
            next_event += 1;
            Some(e)
        } else {
            None
        };
        let camera_world = ctx
            .hand_pose
            .compose(&forward_kinematics(&ctx.params, &q).map_err(crate::servo::ServoError::from)?);
        let masks = render_part_masks(&ctx.intrinsics, &camera_world, scene).unwrap_or_default();
        let command = pipeline.step(event.as_ref(), &masks, &q, ctx)?;
        records.push(TickRecord { t, phase: pipeline.phase(), command });
        if let Command::Servo { qdot } | Command::RotationMove { qdot } = command {
            q = ctx.params.clamp(&JointState {
                wfe: q.wfe + qdot.wfe * ctx.cfg.dt,
                wps: q.wps + qdot.wps * ctx.cfg.dt,
            });
        }
        if pipeline.phase() != Phase::Idle {
            was_active = true;
        } else if was_active && next_event >= events.len() {
            break;
        }
    }
    Ok((records, q))
}

/// Parses an event log in JSON-lines form: `{"t": 1.0, "event": "ArmRaised"}`.
pub fn parse_event_log(text: &str) -> Result<Vec<TriggerEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_x, rot_y};
    use crate::servo::ControllerConfig;
    use crate::vision::shapes;

    fn mask(label: PartLabel, pixels: Vec<(u32, u32)>) -> PartMask {
        let n = pixels.len() as f64;
        let (su, sv) = pixels
            .iter()
            .fold((0.0, 0.0), |acc, &(u, v)| (acc.0 + u as f64, acc.1 + v as f64));
        PartMask {
            label,
            centroid: (su / n, sv / n),
            mean_depth: 0.4,
            pixels,
        }
    }

    fn context_above_object() -> PipelineContext {
        // hand 0.35 m above the object, camera looking down
        let hand = Pose::new(rot_x(std::f64::consts::PI), Vector3::new(0.0, 0.0, 0.35));
        PipelineContext::new(
            WristParams::default(),
            CameraIntrinsics::default_lowres(),
            ControllerConfig::default(),
            hand,
            Vector3::zeros(),
        )
    }

    #[test]
    fn arm_raised_enters_transport_without_motion() {
        let ctx = context_above_object();
        let mut p = Pipeline::new();
        let cmd = p
            .step(
                Some(&TriggerEvent { t: 0.0, event: TriggerKind::ArmRaised }),
                &[],
                &JointState::zero(),
                &ctx,
            )
            .unwrap();
        assert_eq!(cmd, Command::NoOp);
        assert_eq!(p.phase(), Phase::Transport);
    }

    #[test]
    fn illegal_events_are_no_ops() {
        let ctx = context_above_object();
        let mut p = Pipeline::new();
        for kind in [TriggerKind::EmgClose, TriggerKind::EmgRotationTrigger, TriggerKind::ArmLowered] {
            let cmd = p
                .step(Some(&TriggerEvent { t: 0.0, event: kind }), &[], &JointState::zero(), &ctx)
                .unwrap();
            assert_eq!(cmd, Command::NoOp);
            assert_eq!(p.phase(), Phase::Idle);
        }
    }

    #[test]
    fn rotation_trigger_plans_nearest_graspable_part() {
        let ctx = context_above_object();
        let mut p = Pipeline::new();
        p.step(
            Some(&TriggerEvent { t: 0.0, event: TriggerKind::ArmRaised }),
            &[],
            &JointState::zero(),
            &ctx,
        )
        .unwrap();
        let masks = vec![
            mask(PartLabel::NoGrasp, vec![(80, 60)]),
            mask(PartLabel::TopGrasp, vec![(82, 60), (83, 60)]),
            mask(PartLabel::SideGrasp, vec![(120, 100)]),
        ];
        let cmd = p
            .step(
                Some(&TriggerEvent { t: 1.0, event: TriggerKind::EmgRotationTrigger }),
                &masks,
                &JointState::zero(),
                &ctx,
            )
            .unwrap();
        match cmd {
            Command::GraspPlanned { plan } => {
                assert_eq!(plan.selected_label, PartLabel::TopGrasp)
            }
            other => panic!("expected plan, got {other:?}"),
        }
        assert_eq!(p.phase(), Phase::Rotation);
    }

    #[test]
    fn rotation_trigger_with_only_no_grasp_reports_and_stays() {
        let ctx = context_above_object();
        let mut p = Pipeline::new();
        p.step(
            Some(&TriggerEvent { t: 0.0, event: TriggerKind::ArmRaised }),
            &[],
            &JointState::zero(),
            &ctx,
        )
        .unwrap();
        let masks = vec![mask(PartLabel::NoGrasp, vec![(80, 60)])];
        let err = p
            .step(
                Some(&TriggerEvent { t: 1.0, event: TriggerKind::EmgRotationTrigger }),
                &masks,
                &JointState::zero(),
                &ctx,
            )
            .unwrap_err();
        assert_eq!(err, PipelineError::NoGraspablePart);
        assert_eq!(p.phase(), Phase::Transport);
    }

    #[test]
    fn transport_servoes_the_merged_region_not_a_part() {
        let ctx = context_above_object();
        let mut p = Pipeline::new();
        p.step(
            Some(&TriggerEvent { t: 0.0, event: TriggerKind::ArmRaised }),
            &[],
            &JointState::zero(),
            &ctx,
        )
        .unwrap();
        // two parts of one object, 2 px apart: servoing must target the
        // merged centroid, not either part's
        let a = mask(PartLabel::TopGrasp, vec![(90, 60), (91, 60)]);
        let b = mask(PartLabel::SideGrasp, vec![(93, 60), (94, 60)]);
        let merged = merge_object_mask(&[a.clone(), b.clone()], ctx.adjacency_px);
        assert_eq!(merged.len(), 1);
        let expect_centroid = merged[0].centroid;
        let q = JointState::zero();
        let cmd = p.step(None, &[a.clone(), b.clone()], &q, &ctx).unwrap();
        let via_region = {
            let f = to_feature(&ctx.intrinsics, expect_centroid, merged[0].mean_depth).unwrap();
            let target = FeaturePoint { x: 0.0, y: 0.0, depth: f.depth };
            let raw = ppibvs_step(
                &f,
                &target,
                &q,
                &ctx.params,
                &ctx.cfg,
                expect_centroid,
                &ctx.intrinsics,
            )
            .unwrap();
            ctx.cfg.limit_speed(&raw)
        };
        match cmd {
            Command::Servo { qdot } => {
                assert_eq!(qdot, via_region);
            }
            other => panic!("expected servo command, got {other:?}"),
        }
    }

    #[test]
    fn top_grasp_target_points_palm_down() {
        let ctx = context_above_object();
        let q = label_to_wrist_target(
            PartLabel::TopGrasp,
            &ctx.hand_pose,
            &ctx.object_centroid_world,
            &ctx.params,
        )
        .unwrap();
        let n = ctx.hand_pose.rotate_vector(&palm_normal_world(&ctx.params, &q).unwrap());
        assert!(n.dot(&Vector3::new(0.0, 0.0, -1.0)) > 10f64.to_radians().cos());
    }

    #[test]
    fn side_grasp_target_points_palm_horizontally_toward_object() {
        // hand level with the object, forearm pitched slightly down
        let hand = Pose::new(
            rot_y(std::f64::consts::FRAC_PI_2),
            Vector3::new(-0.35, 0.0, 0.0),
        );
        let params = WristParams::default();
        let obj = Vector3::zeros();
        let q = label_to_wrist_target(PartLabel::SideGrasp, &hand, &obj, &params).unwrap();
        let n = hand.rotate_vector(&palm_normal_world(&params, &q).unwrap());
        assert!(n.z.abs() < 10f64.to_radians().sin() + 1e-9);
        let mut horiz = obj - hand.translation;
        horiz.z = 0.0;
        assert!(n.dot(&horiz.normalize()) > 0.0);
    }

    #[test]
    fn no_grasp_label_is_rejected() {
        let ctx = context_above_object();
        assert_eq!(
            label_to_wrist_target(
                PartLabel::NoGrasp,
                &ctx.hand_pose,
                &ctx.object_centroid_world,
                &ctx.params,
            )
            .unwrap_err(),
            PipelineError::NoGraspLabel
        );
    }

    #[test]
    fn grid_oracle_agrees_with_refined_target() {
        // brute-force fine grid as the oracle for the refinement search
        let ctx = context_above_object();
        let q = label_to_wrist_target(
            PartLabel::TopGrasp,
            &ctx.hand_pose,
            &ctx.object_centroid_world,
            &ctx.params,
        )
        .unwrap();
        let score = |q: &JointState| {
            let n = ctx.hand_pose.rotate_vector(&palm_normal_world(&ctx.params, q).unwrap());
            n.dot(&Vector3::new(0.0, 0.0, -1.0))
        };
        let mut best = f64::NEG_INFINITY;
        for i in 0..=400 {
            for j in 0..=400 {
                let cand = JointState::new(
                    ctx.params.wfe_limits[0]
                        + (ctx.params.wfe_limits[1] - ctx.params.wfe_limits[0]) * i as f64 / 400.0,
                    ctx.params.wps_limits[0]
                        + (ctx.params.wps_limits[1] - ctx.params.wps_limits[0]) * j as f64 / 400.0,
                );
                best = best.max(score(&ctx.params.clamp(&cand)));
            }
        }
        assert!(score(&q) >= best - 1e-3);
    }

    #[test]
    fn full_session_replays_through_all_phases() {
        let params = WristParams::default();
        let hand = Pose::new(rot_x(std::f64::consts::PI), Vector3::new(0.0, 0.0, 0.35));
        let mut scene = shapes::bench_bottle();
        scene.pose = Pose::new(rot_x(0.0), Vector3::new(0.01, 0.02, 0.0));
        let ctx = PipelineContext::new(
            params,
            CameraIntrinsics::default_lowres(),
            ControllerConfig::default(),
            hand,
            scene.centroid_world(),
        );
        let events = vec![
            TriggerEvent { t: 0.0, event: TriggerKind::ArmRaised },
            TriggerEvent { t: 2.0, event: TriggerKind::EmgRotationTrigger },
            TriggerEvent { t: 8.0, event: TriggerKind::EmgClose },
            TriggerEvent { t: 9.0, event: TriggerKind::ArmLowered },
        ];
        let (records, _qf) =
            replay_session(&events, &scene, &JointState::zero(), &ctx, 400).unwrap();
        let phases: Vec<Phase> = records.iter().map(|r| r.phase).collect();
        assert!(phases.contains(&Phase::Transport));
        assert!(phases.contains(&Phase::Rotation));
        assert!(phases.contains(&Phase::Grasping));
        assert_eq!(*phases.last().unwrap(), Phase::Idle);
        // no servo commands once rotation started
        let rotation_start = phases.iter().position(|p| *p == Phase::Rotation).unwrap();
        assert!(records[rotation_start..]
            .iter()
            .all(|r| !matches!(r.command, Command::Servo { .. })));
        // phase order is a subsequence of the cycle
        let mut dedup = vec![phases[0]];
        for p in &phases {
            if *p != *dedup.last().unwrap() {
                dedup.push(*p);
            }
        }
        let cycle = [Phase::Idle, Phase::Transport, Phase::Rotation, Phase::Grasping, Phase::Idle];
        assert!(dedup == cycle || dedup[..] == cycle[1..]);
    }

    #[test]
    fn event_log_round_trip() {
        let text = "{\"t\":0.5,\"event\":\"ArmRaised\"}\n{\"t\":1.5,\"event\":\"EmgClose\"}\n";
        let events = parse_event_log(text).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].event, TriggerKind::ArmRaised);
        assert_eq!(events[1].t, 1.5);
    }
}
