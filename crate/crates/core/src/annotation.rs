//! Semi-automatic sequence labeling: ingest an initial camera-to-object
//! pose and a chain of frame-to-frame camera displacements (both produced
//! by external estimators), propagate the pose to every frame and render
//! the per-frame part masks.

use crate::geometry::{chain_displacements, Pose};
use crate::vision::{mask_to_rle, render_part_masks, CameraIntrinsics, PartMask, SceneObject};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("no displacement recorded for frame {frame}, needed by a non-discarded frame")]
    ChainGap { frame: usize },
    #[error("annotation input rejected: {0}")]
    InvalidInput(String),
    #[error("object mesh has no parts")]
    MeshMissing,
    #[error(transparent)]
    Vision(#[from] crate::vision::VisionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Direction of the displacement poses in the input file. The field is
/// mandatory: chained products are convention-sensitive and a silent
/// default would corrupt every downstream mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DisplacementConvention {
    /// `displacements[k]` is the pose of camera frame `k` expressed in
    /// camera frame `k+1`... i.e. the camera displacement from frame `k`
    /// to frame `k+1` as used directly by the chain product.
    #[serde(rename = "T_prev_to_next")]
    PrevToNext,
    /// The inverse storage; entries are inverted on load.
    #[serde(rename = "T_next_to_prev")]
    NextToPrev,
}

/// What to do at discarded frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DiscardPolicy {
    /// Compose the (noisy) displacement through and skip only the output.
    #[default]
    ComposeThrough,
    /// Stop the chain at the first discarded frame.
    TruncateAtDiscard,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisplacementEntry {
    pub frame: usize,
    pub pose: Pose,
}

/// Parsed annotation input. Frame indices are 1-based as in the source
/// videos; `displacements[i].frame = k` relates camera frame `k` to
/// camera frame `k+1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationInput {
    pub convention: DisplacementConvention,
    pub initial_pose: Pose,
    pub displacements: Vec<DisplacementEntry>,
    #[serde(default)]
    pub discarded: Vec<usize>,
}

impl AnnotationInput {
    pub fn from_json(text: &str) -> Result<Self, AnnotationError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("convention").is_none() {
            return Err(AnnotationError::InvalidInput(
                "missing mandatory 'convention' field".into(),
            ));
        }
        let input: AnnotationInput = serde_json::from_value(value)?;
        input.validate()?;
        Ok(input)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, AnnotationError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), AnnotationError> {
        if !self.initial_pose.is_valid(1e-6) {
            return Err(AnnotationError::InvalidInput(
                "initial pose rotation is not orthonormal".into(),
            ));
        }
        let mut prev = 0usize;
        for d in &self.displacements {
            if d.frame <= prev {
                return Err(AnnotationError::InvalidInput(format!(
                    "displacement frame indices must be strictly increasing (saw {} after {})",
                    d.frame, prev
                )));
            }
            prev = d.frame;
        }
        Ok(())
    }

    /// Displacements in the chain direction, inverting if stored reversed.
    fn chain_displacement(&self, entry: &DisplacementEntry) -> Pose {
        match self.convention {
            DisplacementConvention::PrevToNext => entry.pose,
            DisplacementConvention::NextToPrev => entry.pose.inverse(),
        }
    }
}

/// Camera-to-object pose and part masks for one kept frame.
#[derive(Clone, Debug, Serialize)]
pub struct FrameAnnotation {
    pub frame_index: usize,
    pub pose: Pose,
    pub masks: Vec<PartMask>,
}

/// Chains the displacements into per-frame object poses and renders the
/// part masks for every non-discarded frame.
pub fn annotate_sequence(
    input: &AnnotationInput,
    object: &SceneObject,
    intrinsics: &CameraIntrinsics,
    policy: DiscardPolicy,
) -> Result<Vec<FrameAnnotation>, AnnotationError> {
    if object.parts.is_empty() {
        return Err(AnnotationError::MeshMissing);
    }
    let n_frames = input
        .displacements
        .last()
        .map(|d| d.frame + 1)
        .unwrap_or(1);
    let discarded: std::collections::HashSet<usize> = input.discarded.iter().cloned().collect();

    // materialize the contiguous displacement list, checking for gaps
    let mut chain = Vec::with_capacity(n_frames.saturating_sub(1));
    let by_frame: std::collections::HashMap<usize, &DisplacementEntry> =
        input.displacements.iter().map(|d| (d.frame, d)).collect();
    let mut last_frame = n_frames;
    'frames: for k in 1..n_frames {
        match by_frame.get(&k) {
            Some(entry) => chain.push(input.chain_displacement(entry)),
            None => {
                // a gap is tolerable only if every later frame is discarded
                for later in k + 1..=n_frames {
                    if !discarded.contains(&later) {
                        return Err(AnnotationError::ChainGap { frame: k });
                    }
                }
                last_frame = k;
                break 'frames;
            }
        }
        if policy == DiscardPolicy::TruncateAtDiscard && discarded.contains(&(k + 1)) {
            last_frame = k + 1;
            break;
        }
    }

    let poses = chain_displacements(&input.initial_pose, &chain);
    let mut out = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let frame = i + 1;
        if frame > last_frame {
            break;
        }
        if discarded.contains(&frame) {
            continue;
        }
        // render with the object frame as the world frame
        let mut object_local = object.clone();
        object_local.pose = Pose::identity();
        let camera_in_object = pose.inverse();
        let masks = render_part_masks(intrinsics, &camera_in_object, &object_local)?;
        out.push(FrameAnnotation { frame_index: frame, pose: *pose, masks });
    }
    Ok(out)
}

/// Serializable per-frame output: pose plus run-length-encoded masks.
#[derive(Serialize)]
struct FrameFile<'a> {
    frame_index: usize,
    pose: &'a Pose,
    masks: Vec<RleMask>,
}

#[derive(Serialize)]
struct RleMask {
    label: crate::vision::PartLabel,
    centroid: (f64, f64),
    mean_depth: f64,
    runs: Vec<(u32, u32, u32)>,
}

/// Writes one JSON file per frame plus a manifest listing them.
pub fn write_annotations(
    annotations: &[FrameAnnotation],
    out_dir: &std::path::Path,
) -> Result<(), AnnotationError> {
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = Vec::new();
    for ann in annotations {
        let name = format!("frame_{:05}.json", ann.frame_index);
        let file = FrameFile {
            frame_index: ann.frame_index,
            pose: &ann.pose,
            masks: ann
                .masks
                .iter()
                .map(|m| RleMask {
                    label: m.label,
                    centroid: m.centroid,
                    mean_depth: m.mean_depth,
                    runs: mask_to_rle(m),
                })
                .collect(),
        };
        std::fs::write(out_dir.join(&name), serde_json::to_string_pretty(&file)?)?;
        manifest.push(serde_json::json!({ "frame": ann.frame_index, "file": name }));
    }
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&serde_json::Value::Array(manifest))?,
    )?;
    Ok(())
}
