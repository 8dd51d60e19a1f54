//! Simulator and control library for a camera-in-palm prosthetic wrist.
//!
//! The wrist has two degrees of freedom — flexion-extension (WFE) and
//! pronation-supination (WPS) — and a camera embedded in the palm. The
//! crate provides:
//!
//! - [`geometry`]: rigid transforms, twists, pose chaining, and
//!   pseudo-inverse helpers;
//! - [`wrist`]: the kinematic model (forward kinematics, body Jacobian,
//!   joint limits, palm normal);
//! - [`vision`]: a software rasterizer producing part-labeled masks from
//!   analytic or loaded meshes, plus mask merging and selection;
//! - [`servo`]: two image-based visual servoing controllers — standard
//!   IBVS over both joints, and a partitioned variant that drives WPS
//!   with a separate proportional law — and a closed-loop episode
//!   simulator;
//! - [`pipeline`]: the three-phase shared-autonomy grasping state
//!   machine (transport, rotation, grasping) with event-log replay;
//! - [`annotation`]: pose chaining for semi-automatic sequence labeling;
//! - [`bench`]: hemisphere viewpoint sampling and the controller
//!   comparison harness;
//! - [`config`]: TOML/JSON configuration loading.

pub mod annotation;
pub mod bench;
pub mod config;
pub mod geometry;
pub mod pipeline;
pub mod servo;
pub mod vision;
pub mod wrist;

pub use geometry::{Pose, Twist};
pub use servo::{ControllerConfig, ControllerKind, EpisodeResult};
pub use vision::{CameraIntrinsics, PartLabel, SceneObject};
pub use wrist::{JointState, JointVelocity, WristParams};
