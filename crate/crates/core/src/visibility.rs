//! Interaction-context estimation: what each person can see.
//!
//! A head pose anchors a viewing frustum. Every other entity's point cloud
//! is splatted into a virtual pinhole camera sitting on that frustum, its
//! silhouette is closed morphologically and holes inside it are filled from
//! the nearest rendered depth. Per-pixel depth comparison across entities
//! then yields the fraction of each silhouette that stays visible.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use nalgebra::{Isometry3, Matrix4, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::graph::{HeadPose, HumanNode, NodeId, SocialSceneGraph};

#[derive(Debug, Error, PartialEq)]
pub enum VisibilityError {
    #[error("only {valid} of {total} box pixels carry valid depth (need 20%)")]
    InsufficientDepth { valid: usize, total: usize },
    #[error("detection box {0:?} lies outside the image")]
    BoxOutOfBounds([f64; 4]),
    #[error("invalid frustum: {0}")]
    InvalidFrustum(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("raster size mismatch: {0:?} vs {1:?}")]
    RasterMismatch((usize, usize), (usize, usize)),
    #[error("human {0} has no head pose")]
    MissingHeadPose(NodeId),
    #[error("unknown human {0}")]
    UnknownHuman(NodeId),
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
}

/// Pinhole intrinsics of a physical camera (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), VisibilityError> {
        let bad = |m: &str| Err(VisibilityError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < f64::from(self.width)) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < f64::from(self.height)) {
            return bad("cy outside image");
        }
        Ok(())
    }

    /// Camera-frame point (x right, y down, z forward) for pixel `(u, v)` at
    /// depth `z` meters.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }
}

/// Builds a rigid transform from a row-major 4x4 matrix, rejecting matrices
/// whose rotation block is not orthonormal.
pub fn rigid_from_row_major(m: &[f64; 16]) -> Result<Isometry3<f64>, VisibilityError> {
    let mat = Matrix4::from_row_slice(m);
    let r = mat.fixed_view::<3, 3>(0, 0).into_owned();
    let should_be_identity = r.transpose() * r;
    if (should_be_identity - nalgebra::Matrix3::identity()).amax() > 1e-6 {
        return Err(VisibilityError::InvalidPose(
            "rotation block is not orthonormal".into(),
        ));
    }
    if (r.determinant() - 1.0).abs() > 1e-6 {
        return Err(VisibilityError::InvalidPose(
            "rotation is a reflection".into(),
        ));
    }
    if (mat.row(3) - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).amax() > 1e-9 {
        return Err(VisibilityError::InvalidPose(
            "bottom row must be 0 0 0 1".into(),
        ));
    }
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = Translation3::new(mat[(0, 3)], mat[(1, 3)], mat[(2, 3)]);
    Ok(Isometry3::from_parts(t, rot))
}

pub fn rigid_to_row_major(iso: &Isometry3<f64>) -> [f64; 16] {
    let m = iso.to_homogeneous();
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = m[(r, c)];
        }
    }
    out
}

/// 16-bit depth image in millimeters; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, millimeters: u16) -> Self {
        Self {
            width,
            height,
            data: vec![millimeters; (width * height) as usize],
        }
    }

    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.data[(v * self.width + u) as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, mm: u16) {
        self.data[(v * self.width + u) as usize] = mm;
    }

    /// Depth in meters, `None` for invalid pixels.
    pub fn meters(&self, u: u32, v: u32) -> Option<f64> {
        match self.get(u, v) {
            0 => None,
            mm => Some(f64::from(mm) / 1000.0),
        }
    }

    pub fn load_png(path: &Path) -> Result<DepthImage, image::ImageError> {
        let img = image::open(path)?.into_luma16();
        Ok(DepthImage {
            width: img.width(),
            height: img.height(),
            data: img.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), image::ImageError> {
        let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(self.width, self.height, self.data.clone())
                .expect("buffer matches dimensions");
        img.save(path)
    }
}

/// Pixel-space detection box `[x0, y0, x1, y1]`, half-open on the far side.
pub type PixelBox = [f64; 4];

fn box_pixel_range(
    b: &PixelBox,
    width: u32,
    height: u32,
) -> Result<(u32, u32, u32, u32), VisibilityError> {
    let [x0, y0, x1, y1] = *b;
    if !(x0 >= 0.0 && y0 >= 0.0 && x1 <= f64::from(width) && y1 <= f64::from(height))
        || x1 <= x0
        || y1 <= y0
    {
        return Err(VisibilityError::BoxOutOfBounds(*b));
    }
    let u0 = x0.floor() as u32;
    let v0 = y0.floor() as u32;
    let u1 = (x1.ceil() as u32).min(width);
    let v1 = (y1.ceil() as u32).min(height);
    Ok((u0, v0, u1, v1))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Anchors a head detection in 3D: the box center is back-projected at the
/// median valid depth of the central half of the box and moved into the
/// world frame, and the camera-frame orientation is rotated along with it.
pub fn anchor_head_pose(
    head_box: &PixelBox,
    orientation_in_camera: &UnitQuaternion<f64>,
    depth: &DepthImage,
    intrinsics: &CameraIntrinsics,
    world_from_camera: &Isometry3<f64>,
    frame_id: &str,
) -> Result<HeadPose, VisibilityError> {
    let (u0, v0, u1, v1) = box_pixel_range(head_box, depth.width, depth.height)?;
    let total = ((u1 - u0) * (v1 - v0)) as usize;
    let mut all = Vec::with_capacity(total);
    for v in v0..v1 {
        for u in u0..u1 {
            if let Some(z) = depth.meters(u, v) {
                all.push(z);
            }
        }
    }
    if (all.len() as f64) < 0.2 * total as f64 {
        return Err(VisibilityError::InsufficientDepth {
            valid: all.len(),
            total,
        });
    }
    let [x0, y0, x1, y1] = *head_box;
    let (cu, cv) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let (qw, qh) = (0.25 * (x1 - x0), 0.25 * (y1 - y0));
    let mut central = Vec::new();
    for v in v0..v1 {
        for u in u0..u1 {
            let (pu, pv) = (f64::from(u) + 0.5, f64::from(v) + 0.5);
            if (pu - cu).abs() <= qw && (pv - cv).abs() <= qh {
                if let Some(z) = depth.meters(u, v) {
                    central.push(z);
                }
            }
        }
    }
    let z = if central.is_empty() {
        median(&mut all)
    } else {
        median(&mut central)
    };
    let cam_point = intrinsics.back_project(cu, cv, z);
    let world = world_from_camera * nalgebra::Point3::from(cam_point);
    Ok(HeadPose {
        centroid: world.into(),
        orientation: world_from_camera.rotation * orientation_in_camera,
        source_frame_id: frame_id.to_string(),
    })
}

/// Parameters of the simulated field of view and its rasterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilityConfig {
    /// Horizontal field of view, radians.
    pub h_fov: f64,
    /// Vertical field of view, radians.
    pub v_fov: f64,
    pub near: f64,
    pub far: f64,
    pub raster_width: usize,
    pub raster_height: usize,
    /// Depth slack when comparing entities at a pixel, meters.
    pub depth_epsilon: f64,
    pub closing_iterations: usize,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        Self {
            h_fov: 120f64.to_radians(),
            v_fov: 90f64.to_radians(),
            near: 0.3,
            far: 10.0,
            raster_width: 160,
            raster_height: 120,
            depth_epsilon: 0.05,
            closing_iterations: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frustum {
    pub origin: Vec3,
    pub forward: Vector3<f64>,
    pub up: Vector3<f64>,
    pub h_fov: f64,
    pub v_fov: f64,
    pub near: f64,
    pub far: f64,
}

impl Frustum {
    pub fn new(
        origin: Vec3,
        forward: Vector3<f64>,
        up: Vector3<f64>,
        h_fov: f64,
        v_fov: f64,
        near: f64,
        far: f64,
    ) -> Result<Frustum, VisibilityError> {
        let bad = |m: &str| Err(VisibilityError::InvalidFrustum(m.to_string()));
        if !(near > 0.0 && near < far) {
            return bad("need 0 < near < far");
        }
        let pi = std::f64::consts::PI;
        if !(h_fov > 0.0 && h_fov < pi && v_fov > 0.0 && v_fov < pi) {
            return bad("fields of view must lie in (0, pi)");
        }
        if (forward.norm() - 1.0).abs() > 1e-6 || (up.norm() - 1.0).abs() > 1e-6 {
            return bad("forward and up must be unit vectors");
        }
        if forward.dot(&up).abs() > 1e-6 {
            return bad("forward and up must be orthogonal");
        }
        Ok(Frustum {
            origin,
            forward,
            up,
            h_fov,
            v_fov,
            near,
            far,
        })
    }
}

/// Frustum anchored at the head centroid, looking along the head's -z axis.
pub fn build_frustum(
    pose: &HeadPose,
    config: &VisibilityConfig,
) -> Result<Frustum, VisibilityError> {
    let forward = pose.orientation * Vector3::new(0.0, 0.0, -1.0);
    let up = pose.orientation * Vector3::new(0.0, 1.0, 0.0);
    Frustum::new(
        pose.centroid,
        forward,
        up,
        config.h_fov,
        config.v_fov,
        config.near,
        config.far,
    )
}

/// Virtual pinhole camera covering a frustum with a fixed raster.
#[derive(Debug, Clone, Copy)]
pub struct VirtualCamera {
    frustum: Frustum,
    right: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl VirtualCamera {
    pub fn new(frustum: &Frustum, width: usize, height: usize) -> Self {
        let fx = (width as f64 / 2.0) / (frustum.h_fov / 2.0).tan();
        let fy = (height as f64 / 2.0) / (frustum.v_fov / 2.0).tan();
        VirtualCamera {
            frustum: *frustum,
            right: frustum.forward.cross(&frustum.up),
            width,
            height,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    /// Continuous image coordinates and depth along the gaze axis, or `None`
    /// when the point lies outside the frustum.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let d = p.to_vector() - self.frustum.origin.to_vector();
        let depth = d.dot(&self.frustum.forward);
        if !(depth >= self.frustum.near && depth <= self.frustum.far) {
            return None;
        }
        let u = self.cx + self.fx * d.dot(&self.right) / depth;
        let v = self.cy - self.fy * d.dot(&self.frustum.up) / depth;
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u, v, depth))
    }

    /// World-space unit ray through the continuous image point `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let x = (u - self.cx) / self.fx;
        let y = -(v - self.cy) / self.fy;
        (self.frustum.forward + self.right * x + self.frustum.up * y).normalize()
    }

    pub fn origin(&self) -> Vec3 {
        self.frustum.origin
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.frustum.forward
    }
}

/// Rendered depth and silhouette of one entity in one person's view.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthProxy {
    pub entity_id: NodeId,
    pub width: usize,
    pub height: usize,
    /// Meters along the gaze axis; `f64::INFINITY` outside the silhouette.
    pub depth: Vec<f64>,
    pub silhouette: Vec<bool>,
}

impl DepthProxy {
    pub fn silhouette_pixels(&self) -> usize {
        self.silhouette.iter().filter(|&&s| s).count()
    }

    /// Writes the depth proxy as an 8-bit binary graymap, nearer = brighter,
    /// 0 outside the silhouette.
    pub fn write_pgm(&self, path: &Path, far: f64) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .depth
            .iter()
            .zip(&self.silhouette)
            .map(|(&d, &s)| {
                if s {
                    (255.0 * (1.0 - (d / far).clamp(0.0, 1.0))).round().max(1.0) as u8
                } else {
                    0
                }
            })
            .collect();
        f.write_all(&bytes)?;
        f.flush()
    }
}

/// Rows then columns: a pixel is set when any pixel within Chebyshev
/// distance `r` is, or when all of them are (`all`). Pixels beyond the
/// border are ignored by `any` and count as set for `all`.
fn box_filter(mask: &[bool], w: usize, h: usize, r: usize, all: bool) -> Vec<bool> {
    let pass = |src: &[bool], len: usize, lines: usize, at: &dyn Fn(usize, usize) -> usize| {
        let mut out = vec![false; src.len()];
        let mut prefix = vec![0usize; len + 1];
        for line in 0..lines {
            for k in 0..len {
                prefix[k + 1] = prefix[k] + usize::from(src[at(line, k)]);
            }
            for k in 0..len {
                let lo = k.saturating_sub(r);
                let hi = (k + r).min(len - 1);
                let set = prefix[hi + 1] - prefix[lo];
                out[at(line, k)] = if all { set == hi + 1 - lo } else { set > 0 };
            }
        }
        out
    };
    let rows = pass(mask, w, h, &|y, x| y * w + x);
    pass(&rows, h, w, &|x, y| y * w + x)
}

/// Morphological closing, equivalent to `iterations` rounds of 3x3
/// dilation followed by as many of 3x3 erosion. Erosion treats pixels
/// beyond the border as set so that closing never shrinks a mask touching
/// the edge.
pub fn close_mask(mask: &[bool], w: usize, h: usize, iterations: usize) -> Vec<bool> {
    if iterations == 0 || w == 0 || h == 0 {
        return mask.to_vec();
    }
    let grown = box_filter(mask, w, h, iterations, false);
    box_filter(&grown, w, h, iterations, true)
}

/// Fills silhouette pixels lacking depth from the nearest rendered pixel
/// (breadth-first, 8-connected).
fn fill_from_nearest(depth: &mut [f64], silhouette: &[bool], w: usize, h: usize) {
    let mut queue: VecDeque<usize> = (0..depth.len()).filter(|&i| depth[i].is_finite()).collect();
    let mut seen: Vec<bool> = depth.iter().map(|d| d.is_finite()).collect();
    let mut source = depth.to_vec();
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                let j = ny * w + nx;
                if !seen[j] {
                    seen[j] = true;
                    source[j] = source[i];
                    queue.push_back(j);
                }
            }
        }
    }
    for i in 0..depth.len() {
        if silhouette[i] && !depth[i].is_finite() {
            depth[i] = source[i];
        }
    }
}

/// Sub-pixels per pixel side when rendering depth proxies. Even, so that each
/// pixel center is a corner shared by four sub-pixels.
pub const PROXY_SUPERSAMPLE: usize = 4;

/// Renders an entity's points into the view; `None` when no point lands
/// inside the frustum.
///
/// Points are binned on a grid [`PROXY_SUPERSAMPLE`] times finer than the
/// raster and closed there with a proportionally larger window. A pixel is
/// covered when all four sub-pixels meeting at its center are set. Points on
/// a straight edge mark only the bins the edge runs through, so the center
/// test lands on the right side of the edge rather than growing the
/// silhouette by a ring of partly covered pixels.
pub fn render_depth_proxy(
    entity_id: NodeId,
    points: &[Vec3],
    camera: &VirtualCamera,
    closing_iterations: usize,
) -> Option<DepthProxy> {
    let k = PROXY_SUPERSAMPLE;
    let (w, h) = (camera.width, camera.height);
    let projected: Vec<(f64, f64, f64)> = points.iter().filter_map(|p| camera.project(p)).collect();
    if projected.is_empty() {
        return None;
    }
    // Sub-pixel crop around the projections, wide enough for the closing.
    let margin = k * closing_iterations + k;
    let (sw, sh) = (w * k, h * k);
    let sub = |c: f64| (c * k as f64) as usize;
    let x0 = projected
        .iter()
        .map(|p| sub(p.0))
        .min()?
        .saturating_sub(margin);
    let y0 = projected
        .iter()
        .map(|p| sub(p.1))
        .min()?
        .saturating_sub(margin);
    let x1 = (projected.iter().map(|p| sub(p.0)).max()? + margin).min(sw - 1);
    let y1 = (projected.iter().map(|p| sub(p.1)).max()? + margin).min(sh - 1);
    let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut raw = vec![false; cw * ch];
    let mut depth = vec![f64::INFINITY; w * h];
    for &(u, v, z) in &projected {
        raw[(sub(v) - y0) * cw + (sub(u) - x0)] = true;
        let i = (v as usize) * w + (u as usize);
        if z < depth[i] {
            depth[i] = z;
        }
    }
    let mut fine_sil = close_mask(&raw, cw, ch, k * closing_iterations);
    // Crop edges inside the raster are not raster borders: nothing set there
    // may survive erosion's border rule.
    for y in 0..ch {
        for x in 0..cw {
            let interior_edge = (x == 0 && x0 > 0)
                || (y == 0 && y0 > 0)
                || (x == cw - 1 && x1 < sw - 1)
                || (y == ch - 1 && y1 < sh - 1);
            if interior_edge {
                fine_sil[y * cw + x] &= raw[y * cw + x];
            }
        }
    }

    let mut silhouette = vec![false; w * h];
    let half = k / 2;
    let covered = |sx: usize, sy: usize| {
        sx > x0
            && sy > y0
            && sx <= x1
            && sy <= y1
            && [(sx - 1, sy - 1), (sx, sy - 1), (sx - 1, sy), (sx, sy)]
                .iter()
                .all(|&(x, y)| fine_sil[(y - y0) * cw + (x - x0)])
    };
    for v in 0..h {
        for u in 0..w {
            silhouette[v * w + u] = covered(u * k + half, v * k + half);
        }
    }
    if !silhouette.iter().any(|&s| s) {
        // Smaller than a pixel center: keep the pixels the points land in.
        silhouette = depth.iter().map(|d| d.is_finite()).collect();
    }
    fill_from_nearest(&mut depth, &silhouette, w, h);
    let (near, far) = (camera.frustum.near, camera.frustum.far);
    for (d, &s) in depth.iter_mut().zip(&silhouette) {
        *d = if s { d.clamp(near, far) } else { f64::INFINITY };
    }
    Some(DepthProxy {
        entity_id,
        width: w,
        height: h,
        depth,
        silhouette,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityEntry {
    pub entity_id: NodeId,
    #[serde(rename = "fraction")]
    pub visible_fraction: f64,
    #[serde(rename = "pixels")]
    pub silhouette_pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityReport {
    pub human_id: NodeId,
    pub entries: Vec<VisibilityEntry>,
}

impl VisibilityReport {
    pub fn fraction(&self, entity: NodeId) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.entity_id == entity)
            .map(|e| e.visible_fraction)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }
}

/// Per-pixel depth test across entities: a silhouette pixel of `e` is
/// visible when no other entity covering it is more than `epsilon` nearer.
pub fn resolve_occlusion(
    human_id: NodeId,
    proxies: &[DepthProxy],
    epsilon: f64,
) -> Result<VisibilityReport, VisibilityError> {
    let Some(first) = proxies.first() else {
        return Ok(VisibilityReport {
            human_id,
            entries: Vec::new(),
        });
    };
    let dims = (first.width, first.height);
    for p in proxies {
        if (p.width, p.height) != dims {
            return Err(VisibilityError::RasterMismatch(dims, (p.width, p.height)));
        }
    }
    let n = dims.0 * dims.1;
    // Nearest and second-nearest depth per pixel, with the nearest owner.
    let mut best = vec![(f64::INFINITY, usize::MAX); n];
    let mut second = vec![f64::INFINITY; n];
    for (k, p) in proxies.iter().enumerate() {
        for i in 0..n {
            if !p.silhouette[i] {
                continue;
            }
            let d = p.depth[i];
            if d < best[i].0 {
                second[i] = best[i].0;
                best[i] = (d, k);
            } else if d < second[i] {
                second[i] = d;
            }
        }
    }
    let mut entries = Vec::new();
    for (k, p) in proxies.iter().enumerate() {
        let mut total = 0usize;
        let mut visible = 0usize;
        for i in 0..n {
            if !p.silhouette[i] {
                continue;
            }
            total += 1;
            let nearest_other = if best[i].1 == k { second[i] } else { best[i].0 };
            if p.depth[i] <= nearest_other + epsilon {
                visible += 1;
            }
        }
        if total > 0 {
            entries.push(VisibilityEntry {
                entity_id: p.entity_id,
                visible_fraction: visible as f64 / total as f64,
                silhouette_pixel_count: total,
            });
        }
    }
    Ok(VisibilityReport { human_id, entries })
}

/// Entities visible from a person's viewpoint, with visible fractions.
/// The person's own points are excluded.
pub fn interaction_context(
    human: &HumanNode,
    graph: &SocialSceneGraph,
    config: &VisibilityConfig,
) -> Result<VisibilityReport, VisibilityError> {
    let pose = human
        .head_pose
        .as_ref()
        .ok_or(VisibilityError::MissingHeadPose(human.id))?;
    let frustum = build_frustum(pose, config)?;
    let camera = VirtualCamera::new(&frustum, config.raster_width, config.raster_height);
    let proxies: Vec<DepthProxy> = graph
        .nodes()
        .filter(|n| n.id() != human.id)
        .filter_map(|n| render_depth_proxy(n.id(), n.points(), &camera, config.closing_iterations))
        .collect();
    resolve_occlusion(human.id, &proxies, config.depth_epsilon)
}

/// [`interaction_context`] for a human looked up by id.
pub fn interaction_context_for(
    human_id: NodeId,
    graph: &SocialSceneGraph,
    config: &VisibilityConfig,
) -> Result<VisibilityReport, VisibilityError> {
    let human = graph
        .human(human_id)
        .ok_or(VisibilityError::UnknownHuman(human_id))?;
    interaction_context(human, graph, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 80.0,
            cy: 60.0,
            width: 160,
            height: 120,
        }
    }

    fn ahead_pose() -> HeadPose {
        HeadPose::looking_at(
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            "f",
        )
    }

    fn plate(center_x: f64, half: f64, spacing: f64) -> Vec<Vec3> {
        let n = (2.0 * half / spacing).round() as i64;
        let mut pts = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                let y = -half + 2.0 * half * i as f64 / n as f64;
                let z = -half + 2.0 * half * j as f64 / n as f64;
                pts.push(Vec3::new(center_x, y, z));
            }
        }
        pts
    }

    #[test]
    fn head_at_principal_point() {
        let depth = DepthImage::filled(160, 120, 2000);
        let pose = anchor_head_pose(
            &[70.0, 50.0, 90.0, 70.0],
            &UnitQuaternion::identity(),
            &depth,
            &intrinsics(),
            &Isometry3::identity(),
            "f0",
        )
        .unwrap();
        assert!(pose.centroid.distance(&Vec3::new(0.0, 0.0, 2.0)) < 1e-12);
    }

    #[test]
    fn head_with_translated_camera() {
        let depth = DepthImage::filled(160, 120, 2000);
        let cam = Isometry3::translation(1.0, 0.0, 0.0);
        let pose = anchor_head_pose(
            &[70.0, 50.0, 90.0, 70.0],
            &UnitQuaternion::identity(),
            &depth,
            &intrinsics(),
            &cam,
            "f0",
        )
        .unwrap();
        assert!(pose.centroid.distance(&Vec3::new(1.0, 0.0, 2.0)) < 1e-12);
    }

    #[test]
    fn head_orientation_follows_camera_rotation() {
        let depth = DepthImage::filled(160, 120, 1000);
        let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), FRAC_PI_2);
        let cam = Isometry3::from_parts(Translation3::identity(), rot);
        let pose = anchor_head_pose(
            &[70.0, 50.0, 90.0, 70.0],
            &UnitQuaternion::identity(),
            &depth,
            &intrinsics(),
            &cam,
            "f0",
        )
        .unwrap();
        assert!(pose.orientation.angle_to(&rot) < 1e-12);
        assert!(pose.centroid.distance(&Vec3::new(1.0, 0.0, 0.0)) < 1e-12);
    }

    #[test]
    fn head_over_depth_hole() {
        let depth = DepthImage::new(160, 120);
        let err = anchor_head_pose(
            &[70.0, 50.0, 90.0, 70.0],
            &UnitQuaternion::identity(),
            &depth,
            &intrinsics(),
            &Isometry3::identity(),
            "f0",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            VisibilityError::InsufficientDepth { valid: 0, .. }
        ));
    }

    #[test]
    fn head_with_sparse_depth_uses_median() {
        let mut depth = DepthImage::new(160, 120);
        for v in 50..70 {
            for u in 70..80 {
                depth.set(u, v, if v % 2 == 0 { 1500 } else { 2500 });
            }
        }
        // half the box valid; the central region mixes both depths equally.
        let pose = anchor_head_pose(
            &[70.0, 50.0, 90.0, 70.0],
            &UnitQuaternion::identity(),
            &depth,
            &intrinsics(),
            &Isometry3::identity(),
            "f0",
        )
        .unwrap();
        assert!((pose.centroid.z - 2.0).abs() < 1e-12);
    }

    #[test]
    fn box_outside_image_rejected() {
        let depth = DepthImage::filled(160, 120, 1000);
        let err = anchor_head_pose(
            &[150.0, 50.0, 170.0, 70.0],
            &UnitQuaternion::identity(),
            &depth,
            &intrinsics(),
            &Isometry3::identity(),
            "f0",
        )
        .unwrap_err();
        assert!(matches!(err, VisibilityError::BoxOutOfBounds(_)));
    }

    #[test]
    fn identity_orientation_looks_down_local_minus_z() {
        let pose = HeadPose {
            centroid: Vec3::ZERO,
            orientation: UnitQuaternion::identity(),
            source_frame_id: "f".into(),
        };
        let f = build_frustum(&pose, &VisibilityConfig::default()).unwrap();
        assert!((f.forward - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert_eq!(f.far, 10.0);
    }

    #[test]
    fn yaw_rotates_forward_about_up() {
        let pose = HeadPose {
            centroid: Vec3::ZERO,
            orientation: UnitQuaternion::from_axis_angle(&Vector3::y_axis(), FRAC_PI_2),
            source_frame_id: "f".into(),
        };
        let f = build_frustum(&pose, &VisibilityConfig::default()).unwrap();
        assert!((f.forward - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((f.up - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn near_beyond_far_rejected() {
        let cfg = VisibilityConfig {
            near: 10.0,
            far: 10.0,
            ..Default::default()
        };
        assert!(matches!(
            build_frustum(&ahead_pose(), &cfg),
            Err(VisibilityError::InvalidFrustum(_))
        ));
    }

    #[test]
    fn single_point_ahead_renders_one_pixel() {
        let cfg = VisibilityConfig::default();
        let cam = VirtualCamera::new(&build_frustum(&ahead_pose(), &cfg).unwrap(), 160, 120);
        let proxy = render_depth_proxy(NodeId(1), &[Vec3::new(2.0, 0.0, 0.0)], &cam, 2).unwrap();
        assert_eq!(proxy.silhouette_pixels(), 1);
        let i = proxy.silhouette.iter().position(|&s| s).unwrap();
        assert!((proxy.depth[i] - 2.0).abs() < 0.01);
    }

    #[test]
    fn entity_behind_head_is_not_rendered() {
        let cfg = VisibilityConfig::default();
        let cam = VirtualCamera::new(&build_frustum(&ahead_pose(), &cfg).unwrap(), 160, 120);
        assert!(render_depth_proxy(NodeId(1), &plate(-2.0, 0.5, 0.02), &cam, 2).is_none());
        // beyond far and before near
        assert!(render_depth_proxy(NodeId(1), &[Vec3::new(10.5, 0.0, 0.0)], &cam, 2).is_none());
        assert!(render_depth_proxy(NodeId(1), &[Vec3::new(0.2, 0.0, 0.0)], &cam, 2).is_none());
    }

    #[test]
    fn plate_silhouette_matches_analytic_area() {
        let cfg = VisibilityConfig::default();
        let cam = VirtualCamera::new(&build_frustum(&ahead_pose(), &cfg).unwrap(), 160, 120);
        let proxy = render_depth_proxy(NodeId(1), &plate(3.0, 0.5, 0.01), &cam, 2).unwrap();
        // Corners project to u = cx +- fx * 0.5 / 3 and v = cy +- fy * 0.5 / 3.
        let analytic = (2.0 * cam.fx * 0.5 / 3.0) * (2.0 * cam.fy * 0.5 / 3.0);
        let area = proxy.silhouette_pixels() as f64;
        assert!(
            (area - analytic).abs() <= 0.10 * analytic,
            "area {area} vs analytic {analytic}"
        );
    }

    #[test]
    fn closing_fills_sparse_sampling_holes() {
        let cfg = VisibilityConfig::default();
        let cam = VirtualCamera::new(&build_frustum(&ahead_pose(), &cfg).unwrap(), 160, 120);
        let sparse = render_depth_proxy(NodeId(1), &plate(3.0, 0.5, 0.06), &cam, 2).unwrap();
        let dense = render_depth_proxy(NodeId(1), &plate(3.0, 0.5, 0.01), &cam, 2).unwrap();
        let diff = sparse
            .silhouette_pixels()
            .abs_diff(dense.silhouette_pixels());
        assert!(diff as f64 <= 0.1 * dense.silhouette_pixels() as f64);
        for (d, s) in sparse.depth.iter().zip(&sparse.silhouette) {
            if *s {
                assert!((d - 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_occlusion_and_no_occluder() {
        let cfg = VisibilityConfig::default();
        let cam = VirtualCamera::new(&build_frustum(&ahead_pose(), &cfg).unwrap(), 160, 120);
        let near = render_depth_proxy(NodeId(1), &plate(2.0, 0.5, 0.01), &cam, 2).unwrap();
        let far = render_depth_proxy(NodeId(2), &plate(4.0, 0.5, 0.01), &cam, 2).unwrap();
        let report = resolve_occlusion(NodeId(0), &[near.clone(), far], 0.05).unwrap();
        assert_eq!(report.fraction(NodeId(1)), Some(1.0));
        assert_eq!(report.fraction(NodeId(2)), Some(0.0));
        let alone = resolve_occlusion(NodeId(0), &[near], 0.05).unwrap();
        assert_eq!(alone.fraction(NodeId(1)), Some(1.0));
    }

    #[test]
    fn exact_total_occlusion_on_identical_silhouettes() {
        let mk = |id: u32, d: f64| DepthProxy {
            entity_id: NodeId(id),
            width: 4,
            height: 4,
            depth: vec![d; 16],
            silhouette: vec![true; 16],
        };
        let report = resolve_occlusion(NodeId(0), &[mk(1, 2.0), mk(2, 4.0)], 0.05).unwrap();
        assert_eq!(report.fraction(NodeId(1)), Some(1.0));
        assert_eq!(report.fraction(NodeId(2)), Some(0.0));
    }

    #[test]
    fn raster_mismatch_rejected() {
        let a = DepthProxy {
            entity_id: NodeId(1),
            width: 2,
            height: 2,
            depth: vec![1.0; 4],
            silhouette: vec![true; 4],
        };
        let mut b = a.clone();
        b.width = 4;
        b.depth = vec![1.0; 8];
        b.silhouette = vec![true; 8];
        assert!(matches!(
            resolve_occlusion(NodeId(0), &[a, b], 0.05),
            Err(VisibilityError::RasterMismatch(..))
        ));
    }

    #[test]
    fn rigid_matrix_round_trip() {
        let iso = Isometry3::from_parts(
            Translation3::new(1.0, -2.0, 0.5),
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
        );
        let back = rigid_from_row_major(&rigid_to_row_major(&iso)).unwrap();
        assert!((back.to_homogeneous() - iso.to_homogeneous()).amax() < 1e-12);
        let mut scaled = rigid_to_row_major(&iso);
        scaled[0] *= 2.0;
        assert!(rigid_from_row_major(&scaled).is_err());
    }
}
