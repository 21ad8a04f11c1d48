//! Synthetic scenes of boxes and spheres: surface sampling, ray casting and
//! RGB-D rendering. Used to build fixture benchmarks and test scenes.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use nalgebra::{Isometry3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::benchmark::GtCloud;
use crate::geometry::Vec3;
use crate::graph::{EntityNode, HeadPose, HumanNode, Node, NodeId, SocialSceneGraph};
use crate::pipeline::{Detection, DetectionKind, HeadObservation, Mask};
use crate::visibility::{CameraIntrinsics, DepthImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Primitive {
    Box { min: Vec3, max: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

impl Primitive {
    pub fn center(&self) -> Vec3 {
        match *self {
            Primitive::Box { min, max } => Vec3::new(
                0.5 * (min.x + max.x),
                0.5 * (min.y + max.y),
                0.5 * (min.z + max.z),
            ),
            Primitive::Sphere { center, .. } => center,
        }
    }

    /// Nearest positive ray parameter at which `origin + t * dir` hits the
    /// surface.
    pub fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match *self {
            Primitive::Box { min, max } => {
                let (lo, hi) = (min.to_vector(), max.to_vector());
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < lo[a] || origin[a] > hi[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[a];
                    let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                if t0 > t1 || t1 <= 0.0 {
                    None
                } else if t0 > 0.0 {
                    Some(t0)
                } else {
                    Some(t1)
                }
            }
            Primitive::Sphere { center, radius } => {
                let oc = origin - center.to_vector();
                let a = dir.dot(dir);
                let b = 2.0 * oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = (-b - s) / (2.0 * a);
                let t1 = (-b + s) / (2.0 * a);
                if t0 > 0.0 {
                    Some(t0)
                } else if t1 > 0.0 {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }

    /// Points on the surface: a regular grid of pitch `spacing` on each box
    /// face, or latitude rings on a sphere.
    pub fn sample_surface(&self, spacing: f64) -> Vec<Vec3> {
        let steps = |len: f64| ((len / spacing).ceil() as usize).max(1);
        let mut out = Vec::new();
        match *self {
            Primitive::Box { min, max } => {
                let lo = [min.x, min.y, min.z];
                let hi = [max.x, max.y, max.z];
                for axis in 0..3 {
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    let (nu, nv) = (steps(hi[u] - lo[u]), steps(hi[v] - lo[v]));
                    for side in [lo[axis], hi[axis]] {
                        for i in 0..=nu {
                            for j in 0..=nv {
                                let mut p = [0.0; 3];
                                p[axis] = side;
                                p[u] = lo[u] + (hi[u] - lo[u]) * i as f64 / nu as f64;
                                p[v] = lo[v] + (hi[v] - lo[v]) * j as f64 / nv as f64;
                                out.push(Vec3::new(p[0], p[1], p[2]));
                            }
                        }
                    }
                }
            }
            Primitive::Sphere { center, radius } => {
                let rings = steps(std::f64::consts::PI * radius);
                for i in 0..=rings {
                    let theta = std::f64::consts::PI * i as f64 / rings as f64;
                    let r = radius * theta.sin();
                    let n = steps(2.0 * std::f64::consts::PI * r).max(1);
                    for j in 0..n {
                        let phi = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                        out.push(Vec3::new(
                            center.x + r * phi.cos(),
                            center.y + r * phi.sin(),
                            center.z + radius * theta.cos(),
                        ));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub id: u32,
    pub class_label: String,
    pub kind: DetectionKind,
    pub primitive: Primitive,
    /// World point a human is looking at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaze_target: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub instances: Vec<SceneInstance>,
}

/// Height of the head region at the top of a human box, meters.
pub const HEAD_HEIGHT: f64 = 0.25;

impl SyntheticScene {
    pub fn instance(&self, id: u32) -> Option<&SceneInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn cloud(&self, spacing: f64) -> GtCloud {
        let mut c = GtCloud::default();
        for inst in &self.instances {
            c.instances
                .insert(inst.id, inst.primitive.sample_surface(spacing));
        }
        c
    }

    /// Object-only graph whose node ids are the instance ids.
    pub fn object_graph(&self, spacing: f64) -> SocialSceneGraph {
        let mut g = SocialSceneGraph::new();
        for inst in self
            .instances
            .iter()
            .filter(|i| i.kind == DetectionKind::Object)
        {
            let node = EntityNode::from_points(
                NodeId(inst.id),
                &inst.class_label,
                inst.primitive.sample_surface(spacing),
            );
            g.add_node(Node::Object(node))
                .expect("instance ids are unique");
        }
        g
    }

    /// Object graph plus a human node with a head pose for every human
    /// instance, marker labels assigned in id order.
    pub fn full_graph(&self, spacing: f64) -> SocialSceneGraph {
        let mut g = self.object_graph(spacing);
        for inst in self
            .instances
            .iter()
            .filter(|i| i.kind == DetectionKind::Human)
        {
            let marker = g.next_marker_label();
            let mut h = HumanNode::from_points(
                NodeId(inst.id),
                marker,
                inst.primitive.sample_surface(spacing),
            );
            h.head_pose = self.head_pose(inst, "synthetic");
            g.add_node(Node::Human(h)).expect("instance ids are unique");
        }
        g
    }

    pub fn head_center(inst: &SceneInstance) -> Vec3 {
        match inst.primitive {
            Primitive::Box { min, max } => Vec3::new(
                0.5 * (min.x + max.x),
                0.5 * (min.y + max.y),
                max.z - 0.5 * HEAD_HEIGHT,
            ),
            Primitive::Sphere { center, .. } => center,
        }
    }

    pub fn head_pose(&self, inst: &SceneInstance, frame_id: &str) -> Option<HeadPose> {
        let target = inst.gaze_target?;
        Some(HeadPose::looking_at(
            Self::head_center(inst),
            target,
            Vec3::new(0.0, 0.0, 1.0),
            frame_id,
        ))
    }
}

/// One rendered view.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    /// Instance id per pixel.
    pub instance: Vec<Option<u32>>,
    pub width: u32,
    pub height: u32,
}

impl RenderedFrame {
    pub fn mask(&self, id: u32) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.instance.iter().map(|&i| i == Some(id)).collect(),
        }
    }

    pub fn pixel_count(&self, id: u32) -> usize {
        self.instance.iter().filter(|&&i| i == Some(id)).count()
    }

    /// Tight pixel box `[x0, y0, x1, y1]` of an instance.
    pub fn bounding_box(&self, id: u32) -> Option<[f64; 4]> {
        let w = self.width as usize;
        let mut b: Option<[usize; 4]> = None;
        for (i, _) in self
            .instance
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == Some(id))
        {
            let (x, y) = (i % w, i / w);
            b = Some(match b {
                None => [x, y, x + 1, y + 1],
                Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
            });
        }
        b.map(|[x0, y0, x1, y1]| [x0 as f64, y0 as f64, x1 as f64, y1 as f64])
    }
}

fn class_color(label: &str) -> [u8; 3] {
    let mut h: u32 = 2166136261;
    for b in label.bytes() {
        h = (h ^ u32::from(b)).wrapping_mul(16777619);
    }
    [
        64 + (h & 0x7f) as u8,
        64 + ((h >> 8) & 0x7f) as u8,
        64 + ((h >> 16) & 0x7f) as u8,
    ]
}

/// Casts one ray per pixel center. Depth is the camera-frame z of the
/// nearest hit in millimeters; misses are 0.
pub fn render(
    scene: &SyntheticScene,
    intrinsics: &CameraIntrinsics,
    world_from_camera: &Isometry3<f64>,
) -> RenderedFrame {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut rgb = RgbImage::from_pixel(w, h, Rgb([40, 40, 48]));
    let mut depth = DepthImage::new(w, h);
    let mut instance = vec![None; (w * h) as usize];
    let origin = world_from_camera.translation.vector;
    let light = Vector3::new(0.3, -0.4, 0.85).normalize();
    for v in 0..h {
        for u in 0..w {
            let d_cam = Vector3::new(
                (f64::from(u) + 0.5 - intrinsics.cx) / intrinsics.fx,
                (f64::from(v) + 0.5 - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            let dir = world_from_camera.rotation * d_cam;
            let mut best: Option<(f64, &SceneInstance)> = None;
            for inst in &scene.instances {
                if let Some(t) = inst.primitive.ray_hit(&origin, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, inst));
                    }
                }
            }
            if let Some((t, inst)) = best {
                let mm = (t * 1000.0).round();
                if mm >= 1.0 && mm <= f64::from(u16::MAX) {
                    depth.set(u, v, mm as u16);
                }
                instance[(v * w + u) as usize] = Some(inst.id);
                let p = origin + dir * t;
                let n = surface_normal(&inst.primitive, &p);
                let shade = 0.55 + 0.45 * n.dot(&light).abs();
                let c = class_color(&inst.class_label);
                rgb.put_pixel(
                    u,
                    v,
                    Rgb(c.map(|x| (f64::from(x) * shade).round().min(255.0) as u8)),
                );
            }
        }
    }
    RenderedFrame {
        rgb,
        depth,
        instance,
        width: w,
        height: h,
    }
}

fn surface_normal(p: &Primitive, x: &Vector3<f64>) -> Vector3<f64> {
    match *p {
        Primitive::Sphere { center, .. } => (x - center.to_vector()).normalize(),
        Primitive::Box { min, max } => {
            let (lo, hi) = (min.to_vector(), max.to_vector());
            let mut best = (f64::INFINITY, Vector3::z());
            for a in 0..3 {
                for (side, sign) in [(lo[a], -1.0), (hi[a], 1.0)] {
                    let d = (x[a] - side).abs();
                    if d < best.0 {
                        let mut n = Vector3::zeros();
                        n[a] = sign;
                        best = (d, n);
                    }
                }
            }
            best.1
        }
    }
}

/// Camera pose at `eye` looking at `target` with world +z up, in the
/// camera convention x right, y down, z forward.
pub fn look_at_camera(eye: Vec3, target: Vec3) -> Isometry3<f64> {
    let f = (target.to_vector() - eye.to_vector()).normalize();
    let up = Vector3::z();
    let right = f.cross(&up).normalize();
    let down = f.cross(&right);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[
        right, down, f,
    ]));
    Isometry3::from_parts(
        eye.to_vector().into(),
        UnitQuaternion::from_rotation_matrix(&rot),
    )
}

/// Detections, masks and head observations for every instance with at
/// least `min_pixels` visible pixels, in instance order.
pub fn detect(
    scene: &SyntheticScene,
    frame: &RenderedFrame,
    intrinsics: &CameraIntrinsics,
    world_from_camera: &Isometry3<f64>,
    min_pixels: usize,
) -> (Vec<Detection>, Vec<Mask>, Vec<HeadObservation>) {
    let mut dets = Vec::new();
    let mut masks = Vec::new();
    let mut heads = Vec::new();
    for inst in &scene.instances {
        if frame.pixel_count(inst.id) < min_pixels {
            continue;
        }
        let Some(bbox) = frame.bounding_box(inst.id) else {
            continue;
        };
        let index = dets.len();
        dets.push(Detection(bbox, inst.class_label.clone(), inst.kind));
        masks.push(frame.mask(inst.id));
        if inst.kind != DetectionKind::Human {
            continue;
        }
        let Some(pose) = scene.head_pose(inst, "") else {
            continue;
        };
        if let Some(head_box) = head_box(inst, frame, intrinsics, world_from_camera) {
            let q = world_from_camera.rotation.inverse() * pose.orientation;
            heads.push(HeadObservation {
                detection: index,
                head_box,
                orientation: [q.w, q.i, q.j, q.k],
            });
        }
    }
    (dets, masks, heads)
}

/// Pixel box of the visible head region of a human instance.
fn head_box(
    inst: &SceneInstance,
    frame: &RenderedFrame,
    intrinsics: &CameraIntrinsics,
    world_from_camera: &Isometry3<f64>,
) -> Option<[f64; 4]> {
    let Primitive::Box { max, .. } = inst.primitive else {
        return None;
    };
    let w = frame.width as usize;
    let mut b: Option<[usize; 4]> = None;
    for (i, _) in frame
        .instance
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == Some(inst.id))
    {
        let (u, v) = (i % w, i / w);
        let Some(z) = frame.depth.meters(u as u32, v as u32) else {
            continue;
        };
        let cam = intrinsics.back_project(u as f64 + 0.5, v as f64 + 0.5, z);
        let world = world_from_camera * nalgebra::Point3::from(cam);
        if world.z < max.z - HEAD_HEIGHT {
            continue;
        }
        b = Some(match b {
            None => [u, v, u + 1, v + 1],
            Some([x0, y0, x1, y1]) => [x0.min(u), y0.min(v), x1.max(u + 1), y1.max(v + 1)],
        });
    }
    b.map(|[x0, y0, x1, y1]| [x0 as f64, y0 as f64, x1 as f64, y1 as f64])
}

/// Counts per instance of rendered pixels, for quick inspection.
pub fn pixel_histogram(frame: &RenderedFrame) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for id in frame.instance.iter().flatten() {
        *out.entry(*id).or_insert(0) += 1;
    }
    out
}
