//! On-disk configuration: a single TOML or JSON file overriding wrist
//! geometry, controller gains, camera intrinsics and sampler settings.
//! Angles are degrees in the file, radians in the API types.

use crate::bench::HemisphereSampler;
use crate::servo::{ArmSide, ControllerConfig};
use crate::vision::CameraIntrinsics;
use crate::wrist::WristParams;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// All fields optional; anything omitted keeps the built-in default.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub wrist: WristSection,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub camera: CameraSection,
    #[serde(default)]
    pub sampler: SamplerSection,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WristSection {
    /// Camera tilt away from the forearm axis, degrees.
    pub camera_tilt_deg: Option<f64>,
    /// Camera origin in the effector frame, meters.
    pub camera_offset: Option<[f64; 3]>,
    /// Flexion-extension limits [min, max], degrees.
    pub wfe_limits_deg: Option<[f64; 2]>,
    /// Pronation-supination limits [min, max], degrees.
    pub wps_limits_deg: Option<[f64; 2]>,
    pub palm_normal: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub lambda: Option<f64>,
    pub lambda_wps: Option<f64>,
    pub convergence_eps: Option<f64>,
    pub convergence_hold: Option<u32>,
    pub max_iterations: Option<u32>,
    pub dt: Option<f64>,
    pub damping: Option<f64>,
    pub max_joint_speed: Option<f64>,
    /// "right" or "left".
    pub arm_side: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub width: Option<u32>,
    pub height: Option<u32>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub center: Option<[f64; 3]>,
    pub radius_range: Option<[f64; 2]>,
    pub radius_bins: Option<usize>,
    pub points_per_bin: Option<usize>,
    /// Maximum roll about the viewing axis, degrees.
    pub max_roll_deg: Option<f64>,
}

impl ConfigFile {
    /// Parses TOML or JSON based on the file extension (TOML otherwise).
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let is_json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false);
        if is_json {
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
        }
    }

    pub fn wrist_params(&self) -> Result<WristParams, ConfigError> {
        let mut p = WristParams::default();
        let w = &self.wrist;
        if let Some(t) = w.camera_tilt_deg {
            p.camera_tilt = t.to_radians();
        }
        if let Some(o) = w.camera_offset {
            p.camera_offset = Vector3::new(o[0], o[1], o[2]);
        }
        if let Some(l) = w.wfe_limits_deg {
            p.wfe_limits = [l[0].to_radians(), l[1].to_radians()];
        }
        if let Some(l) = w.wps_limits_deg {
            p.wps_limits = [l[0].to_radians(), l[1].to_radians()];
        }
        if let Some(n) = w.palm_normal {
            p.palm_normal_local = Vector3::new(n[0], n[1], n[2]);
        }
        if p.wfe_limits[0] > p.wfe_limits[1] || p.wps_limits[0] > p.wps_limits[1] {
            return Err(ConfigError::Invalid("joint limits must satisfy min <= max".into()));
        }
        Ok(p)
    }

    pub fn controller_config(&self) -> Result<ControllerConfig, ConfigError> {
        let mut c = ControllerConfig::default();
        let s = &self.controller;
        if let Some(v) = s.lambda {
            c.lambda = v;
        }
        if let Some(v) = s.lambda_wps {
            c.lambda_wps = v;
        }
        if let Some(v) = s.convergence_eps {
            c.convergence_eps = v;
        }
        if let Some(v) = s.convergence_hold {
            c.convergence_hold = v;
        }
        if let Some(v) = s.max_iterations {
            c.max_iterations = v;
        }
        if let Some(v) = s.dt {
            if v <= 0.0 {
                return Err(ConfigError::Invalid("dt must be positive".into()));
            }
            c.dt = v;
        }
        if let Some(v) = s.damping {
            c.damping = v;
        }
        if let Some(v) = s.max_joint_speed {
            if v <= 0.0 {
                return Err(ConfigError::Invalid("max_joint_speed must be positive".into()));
            }
            c.max_joint_speed = v;
        }
        if let Some(side) = &s.arm_side {
            c.arm_side = match side.to_ascii_lowercase().as_str() {
                "right" | "rightarm" => ArmSide::RightArm,
                "left" | "leftarm" => ArmSide::LeftArm,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "arm_side must be 'right' or 'left', got '{other}'"
                    )))
                }
            };
        }
        Ok(c)
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let mut k = CameraIntrinsics::default_lowres();
        let c = &self.camera;
        if let Some(v) = c.fx {
            k.fx = v;
        }
        if let Some(v) = c.fy {
            k.fy = v;
        }
        if let Some(v) = c.cx {
            k.cx = v;
        }
        if let Some(v) = c.cy {
            k.cy = v;
        }
        if let Some(v) = c.width {
            k.width = v;
        }
        if let Some(v) = c.height {
            k.height = v;
        }
        k
    }

    /// Sampler with file overrides applied; `center` and `seed` come from
    /// the caller unless the file pins a center.
    pub fn sampler(&self, default_center: Vector3<f64>, seed: u64) -> HemisphereSampler {
        let mut h = HemisphereSampler::for_object(default_center, seed);
        let s = &self.sampler;
        if let Some(c) = s.center {
            h.center = c;
        }
        if let Some(r) = s.radius_range {
            h.radius_range = r;
        }
        if let Some(b) = s.radius_bins {
            h.radius_bins = b;
        }
        if let Some(p) = s.points_per_bin {
            h.points_per_bin = p;
        }
        if let Some(r) = s.max_roll_deg {
            h.rotation_range = [0.0, r.to_radians()];
        }
        h
    }
}
