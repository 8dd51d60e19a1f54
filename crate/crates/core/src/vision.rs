//! Pinhole camera model, part-labeled triangle meshes, ground-truth part
//! mask synthesis by software rasterization, centroids, mask merging and
//! selection. This stands in for the segmentation network: masks are
//! exact because they come from geometry, not from a model.

use crate::geometry::Pose;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VisionError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("no object part projects into the image")]
    NothingVisible,
    #[error("mask has no pixels")]
    EmptyMask,
    #[error("empty input list")]
    EmptyInput,
    #[error("depth must be positive (got {depth})")]
    NonPositiveDepth { depth: f64 },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Full-resolution default: 640x480, f = 460 px, centered principal point.
    pub fn default_full() -> Self {
        CameraIntrinsics {
            fx: 460.0,
            fy: 460.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }

    /// Low-resolution default used by tests and the benchmark loop,
    /// same field of view as [`default_full`](Self::default_full).
    pub fn default_lowres() -> Self {
        CameraIntrinsics {
            fx: 115.0,
            fy: 115.0,
            cx: 80.0,
            cy: 60.0,
            width: 160,
            height: 120,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }
}

/// Wrist-configuration class of an object part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartLabel {
    TopGrasp,
    SideGrasp,
    NoGrasp,
}

impl PartLabel {
    pub fn ordinal(&self) -> u8 {
        match self {
            PartLabel::TopGrasp => 0,
            PartLabel::SideGrasp => 1,
            PartLabel::NoGrasp => 2,
        }
    }
}

/// Indexed triangle mesh, vertices in meters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn vertex(&self, i: u32) -> Vector3<f64> {
        let v = self.vertices[i as usize];
        Vector3::new(v[0], v[1], v[2])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenePart {
    pub label: PartLabel,
    pub mesh: TriMesh,
}

/// A part-labeled object placed in the world.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneObject {
    pub parts: Vec<ScenePart>,
    pub pose: Pose,
}

impl SceneObject {
    /// Mean of all mesh vertices, in world coordinates.
    pub fn centroid_world(&self) -> Vector3<f64> {
        let mut sum = Vector3::zeros();
        let mut n = 0usize;
        for part in &self.parts {
            for v in &part.mesh.vertices {
                sum += Vector3::new(v[0], v[1], v[2]);
                n += 1;
            }
        }
        self.pose.transform_point(&(sum / n.max(1) as f64))
    }

    /// Radius of the vertex cloud around the object-frame centroid.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.pose.inverse().transform_point(&self.centroid_world());
        let mut r: f64 = 0.0;
        for part in &self.parts {
            for v in &part.mesh.vertices {
                r = r.max((Vector3::new(v[0], v[1], v[2]) - c).norm());
            }
        }
        r
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Labeled pixel region with centroid (pixels) and mean depth (meters).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartMask {
    pub label: PartLabel,
    pub pixels: Vec<(u32, u32)>,
    pub centroid: (f64, f64),
    pub mean_depth: f64,
}

/// Label-free pixel region produced by mask merging.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MergedRegion {
    pub pixels: Vec<(u32, u32)>,
    pub centroid: (f64, f64),
    pub mean_depth: f64,
}

/// A selectable pixel region: part masks and merged regions share the
/// center-distance selection rule.
pub trait Region {
    fn centroid(&self) -> (f64, f64);
    fn pixel_count(&self) -> usize;
    /// Final tie-break key; regions without labels all map to 0.
    fn label_ordinal(&self) -> u8 {
        0
    }
}

impl Region for PartMask {
    fn centroid(&self) -> (f64, f64) {
        self.centroid
    }
    fn pixel_count(&self) -> usize {
        self.pixels.len()
    }
    fn label_ordinal(&self) -> u8 {
        self.label.ordinal()
    }
}

impl Region for MergedRegion {
    fn centroid(&self) -> (f64, f64) {
        self.centroid
    }
    fn pixel_count(&self) -> usize {
        self.pixels.len()
    }
}

/// Normalized image-plane feature with its depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

/// Default Chebyshev pixel distance under which masks count as neighboring.
pub const DEFAULT_ADJACENCY_PX: f64 = 3.0;

/// Standard pinhole projection of a camera-frame point.
pub fn project_point(
    intrinsics: &CameraIntrinsics,
    p_camera: &Vector3<f64>,
) -> Result<(f64, f64), VisionError> {
    if p_camera.z <= 0.0 {
        return Err(VisionError::BehindCamera { z: p_camera.z });
    }
    Ok((
        intrinsics.fx * p_camera.x / p_camera.z + intrinsics.cx,
        intrinsics.fy * p_camera.y / p_camera.z + intrinsics.cy,
    ))
}

/// Renders one mask per visible part with nearest-depth visibility.
///
/// `camera_pose` is the camera frame in world coordinates. Per-pixel
/// occlusion is resolved by a z-buffer; parts fully occluded or out of
/// frame are omitted. Triangles with a vertex at or behind the image
/// plane are culled rather than clipped.
pub fn render_part_masks(
    intrinsics: &CameraIntrinsics,
    camera_pose: &Pose,
    object: &SceneObject,
) -> Result<Vec<PartMask>, VisionError> {
    let w = intrinsics.width as usize;
    let h = intrinsics.height as usize;
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut labelbuf = vec![u16::MAX; w * h];

    let cam_from_obj = camera_pose.inverse().compose(&object.pose);
    for (part_idx, part) in object.parts.iter().enumerate() {
        for tri in &part.mesh.triangles {
            let p0 = cam_from_obj.transform_point(&part.mesh.vertex(tri[0]));
            let p1 = cam_from_obj.transform_point(&part.mesh.vertex(tri[1]));
            let p2 = cam_from_obj.transform_point(&part.mesh.vertex(tri[2]));
            if p0.z <= 1e-6 || p1.z <= 1e-6 || p2.z <= 1e-6 {
                continue;
            }
            let s0 = (
                intrinsics.fx * p0.x / p0.z + intrinsics.cx,
                intrinsics.fy * p0.y / p0.z + intrinsics.cy,
            );
            let s1 = (
                intrinsics.fx * p1.x / p1.z + intrinsics.cx,
                intrinsics.fy * p1.y / p1.z + intrinsics.cy,
            );
            let s2 = (
                intrinsics.fx * p2.x / p2.z + intrinsics.cx,
                intrinsics.fy * p2.y / p2.z + intrinsics.cy,
            );
            rasterize_triangle(
                w,
                h,
                &mut zbuf,
                &mut labelbuf,
                part_idx as u16,
                [s0, s1, s2],
                [p0.z, p1.z, p2.z],
            );
        }
    }

    // gather pixels per part
    let mut pixels: Vec<Vec<(u32, u32)>> = vec![Vec::new(); object.parts.len()];
    let mut depth_sums = vec![0.0f64; object.parts.len()];
    for v in 0..h {
        for u in 0..w {
            let idx = labelbuf[v * w + u];
            if idx != u16::MAX {
                pixels[idx as usize].push((u as u32, v as u32));
                depth_sums[idx as usize] += zbuf[v * w + u];
            }
        }
    }

    let mut masks = Vec::new();
    for (i, px) in pixels.into_iter().enumerate() {
        if px.is_empty() {
            continue;
        }
        let n = px.len() as f64;
        let (su, sv) = px
            .iter()
            .fold((0.0, 0.0), |acc, &(u, v)| (acc.0 + u as f64, acc.1 + v as f64));
        masks.push(PartMask {
            label: object.parts[i].label,
            pixels: px,
            centroid: (su / n, sv / n),
            mean_depth: depth_sums[i] / n,
        });
    }
    if masks.is_empty() {
        return Err(VisionError::NothingVisible);
    }
    Ok(masks)
}

/// Edge-function rasterization with perspective-correct depth (linear 1/z).
#[allow(clippy::too_many_arguments)]
fn rasterize_triangle(
    w: usize,
    h: usize,
    zbuf: &mut [f64],
    labelbuf: &mut [u16],
    label: u16,
    s: [(f64, f64); 3],
    z: [f64; 3],
) {
    let area = edge(s[0], s[1], s[2]);
    if area.abs() < 1e-12 {
        return;
    }
    let min_u = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let max_u = (s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil() as isize)
        .clamp(0, w as isize - 1) as usize;
    let min_v = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let max_v = (s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil() as isize)
        .clamp(0, h as isize - 1) as usize;
    if min_u > max_u || min_v > max_v || min_u >= w || min_v >= h {
        return;
    }
    let inv_z = [1.0 / z[0], 1.0 / z[1], 1.0 / z[2]];
    for v in min_v..=max_v {
        for u in min_u..=max_u {
            let p = (u as f64 + 0.5, v as f64 + 0.5);
            let w0 = edge(s[1], s[2], p) / area;
            let w1 = edge(s[2], s[0], p) / area;
            let w2 = edge(s[0], s[1], p) / area;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let depth = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]);
            let idx = v * w + u;
            if depth < zbuf[idx] {
                zbuf[idx] = depth;
                labelbuf[idx] = label;
            }
        }
    }
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Arithmetic mean of the mask's pixel coordinates.
pub fn mask_centroid(mask: &PartMask) -> Result<(f64, f64), VisionError> {
    if mask.pixels.is_empty() {
        return Err(VisionError::EmptyMask);
    }
    let n = mask.pixels.len() as f64;
    let (su, sv) = mask
        .pixels
        .iter()
        .fold((0.0, 0.0), |acc, &(u, v)| (acc.0 + u as f64, acc.1 + v as f64));
    Ok((su / n, sv / n))
}

/// Unions masks whose pixel sets lie within Chebyshev distance
/// `adjacency_px` of each other, transitively, into label-free regions.
pub fn merge_object_mask(masks: &[PartMask], adjacency_px: f64) -> Vec<MergedRegion> {
    let n = masks.len();
    if n == 0 {
        return Vec::new();
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let r = find(parent, parent[i]);
            parent[i] = r;
        }
        parent[i]
    }
    for i in 0..n {
        for j in i + 1..n {
            if masks_adjacent(&masks[i], &masks[j], adjacency_px) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut regions = Vec::new();
    for (_, members) in groups {
        let mut pixels: Vec<(u32, u32)> = Vec::new();
        let mut depth_sum = 0.0;
        for &m in &members {
            for &p in &masks[m].pixels {
                pixels.push(p);
            }
            depth_sum += masks[m].mean_depth * masks[m].pixels.len() as f64;
        }
        pixels.sort_unstable();
        pixels.dedup();
        let count = pixels.len() as f64;
        let (su, sv) = pixels
            .iter()
            .fold((0.0, 0.0), |acc, &(u, v)| (acc.0 + u as f64, acc.1 + v as f64));
        let total: f64 = members.iter().map(|&m| masks[m].pixels.len() as f64).sum();
        regions.push(MergedRegion {
            centroid: (su / count, sv / count),
            mean_depth: depth_sum / total,
            pixels,
        });
    }
    regions
}

fn masks_adjacent(a: &PartMask, b: &PartMask, adjacency_px: f64) -> bool {
    // bounding-box pre-check before the exact pairwise scan
    let bbox = |m: &PartMask| {
        m.pixels.iter().fold(
            (u32::MAX, 0u32, u32::MAX, 0u32),
            |(u0, u1, v0, v1), &(u, v)| (u0.min(u), u1.max(u), v0.min(v), v1.max(v)),
        )
    };
    let (au0, au1, av0, av1) = bbox(a);
    let (bu0, bu1, bv0, bv1) = bbox(b);
    let gap_u = (bu0.saturating_sub(au1)).max(au0.saturating_sub(bu1)) as f64;
    let gap_v = (bv0.saturating_sub(av1)).max(av0.saturating_sub(bv1)) as f64;
    if gap_u.max(gap_v) > adjacency_px {
        return false;
    }
    for &(ua, va) in &a.pixels {
        for &(ub, vb) in &b.pixels {
            let d = (ua as f64 - ub as f64).abs().max((va as f64 - vb as f64).abs());
            if d <= adjacency_px {
                return true;
            }
        }
    }
    false
}

/// Picks the region whose centroid is nearest the principal point.
/// Ties break toward the larger pixel count, then the lowest label ordinal.
pub fn select_nearest_to_center<'a, T: Region>(
    items: &'a [T],
    intrinsics: &CameraIntrinsics,
) -> Result<&'a T, VisionError> {
    if items.is_empty() {
        return Err(VisionError::EmptyInput);
    }
    let (cx, cy) = intrinsics.center();
    let key = |r: &T| {
        let (u, v) = r.centroid();
        ((u - cx).powi(2) + (v - cy).powi(2)).sqrt()
    };
    let mut best = &items[0];
    let mut best_d = key(best);
    for item in &items[1..] {
        let d = key(item);
        let better = d < best_d
            || (d == best_d
                && (item.pixel_count() > best.pixel_count()
                    || (item.pixel_count() == best.pixel_count()
                        && item.label_ordinal() < best.label_ordinal())));
        if better {
            best = item;
            best_d = d;
        }
    }
    Ok(best)
}

/// Converts a pixel centroid into the normalized coordinates the
/// interaction matrix expects.
pub fn to_feature(
    intrinsics: &CameraIntrinsics,
    centroid_px: (f64, f64),
    depth: f64,
) -> Result<FeaturePoint, VisionError> {
    if depth <= 0.0 {
        return Err(VisionError::NonPositiveDepth { depth });
    }
    Ok(FeaturePoint {
        x: (centroid_px.0 - intrinsics.cx) / intrinsics.fx,
        y: (centroid_px.1 - intrinsics.cy) / intrinsics.fy,
        depth,
    })
}

/// Run-length encoding of a mask, one `(row, start, len)` triple per run.
pub fn mask_to_rle(mask: &PartMask) -> Vec<(u32, u32, u32)> {
    let mut sorted: Vec<(u32, u32)> = mask.pixels.iter().map(|&(u, v)| (v, u)).collect();
    sorted.sort_unstable();
    let mut runs = Vec::new();
    let mut iter = sorted.into_iter();
    if let Some((mut row, mut start)) = iter.next() {
        let mut len = 1u32;
        for (v, u) in iter {
            if v == row && u == start + len {
                len += 1;
            } else {
                runs.push((row, start, len));
                row = v;
                start = u;
                len = 1;
            }
        }
        runs.push((row, start, len));
    }
    runs
}

pub mod shapes {
    //! Analytic mesh builders for the simulator and tests.

    use super::{PartLabel, ScenePart, SceneObject, TriMesh};
    use crate::geometry::Pose;

    /// Closed cylinder along +z from `z0` to `z1`.
    pub fn cylinder(radius: f64, z0: f64, z1: f64, segments: u32) -> TriMesh {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for &z in &[z0, z1] {
            for i in 0..segments {
                let a = 2.0 * std::f64::consts::PI * i as f64 / segments as f64;
                vertices.push([radius * a.cos(), radius * a.sin(), z]);
            }
        }
        let bot_center = vertices.len() as u32;
        vertices.push([0.0, 0.0, z0]);
        let top_center = vertices.len() as u32;
        vertices.push([0.0, 0.0, z1]);
        for i in 0..segments {
            let j = (i + 1) % segments;
            let (b0, b1) = (i, j);
            let (t0, t1) = (segments + i, segments + j);
            triangles.push([b0, b1, t1]);
            triangles.push([b0, t1, t0]);
            triangles.push([b1, b0, bot_center]);
            triangles.push([t0, t1, top_center]);
        }
        TriMesh { vertices, triangles }
    }

    /// Axis-aligned box centered at `center` with half-extents `half`.
    pub fn cuboid(center: [f64; 3], half: [f64; 3]) -> TriMesh {
        let (cx, cy, cz) = (center[0], center[1], center[2]);
        let (hx, hy, hz) = (half[0], half[1], half[2]);
        let vertices = vec![
            [cx - hx, cy - hy, cz - hz],
            [cx + hx, cy - hy, cz - hz],
            [cx + hx, cy + hy, cz - hz],
            [cx - hx, cy + hy, cz - hz],
            [cx - hx, cy - hy, cz + hz],
            [cx + hx, cy - hy, cz + hz],
            [cx + hx, cy + hy, cz + hz],
            [cx - hx, cy + hy, cz + hz],
        ];
        let triangles = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [1, 2, 6],
            [1, 6, 5],
            [2, 3, 7],
            [2, 7, 6],
            [3, 0, 4],
            [3, 4, 7],
        ];
        TriMesh { vertices, triangles }
    }

    /// Latitude-longitude sphere.
    pub fn sphere(center: [f64; 3], radius: f64, rings: u32, segments: u32) -> TriMesh {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for r in 0..=rings {
            let phi = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segments {
                let theta = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
                vertices.push([
                    center[0] + radius * phi.sin() * theta.cos(),
                    center[1] + radius * phi.sin() * theta.sin(),
                    center[2] + radius * phi.cos(),
                ]);
            }
        }
        for r in 0..rings {
            for s in 0..segments {
                let s1 = (s + 1) % segments;
                let a = r * segments + s;
                let b = r * segments + s1;
                let c = (r + 1) * segments + s1;
                let d = (r + 1) * segments + s;
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
        TriMesh { vertices, triangles }
    }

    /// Two-part benchmark bottle: a side-graspable body cylinder topped by
    /// a top-graspable cap, roughly centered on the origin.
    pub fn bench_bottle() -> SceneObject {
        SceneObject {
            parts: vec![
                ScenePart {
                    label: PartLabel::SideGrasp,
                    mesh: cylinder(0.035, -0.095, 0.055, 24),
                },
                ScenePart {
                    label: PartLabel::TopGrasp,
                    mesh: cylinder(0.018, 0.055, 0.095, 24),
                },
            ],
            pose: Pose::identity(),
        }
    }
}
