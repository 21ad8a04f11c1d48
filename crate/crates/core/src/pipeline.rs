//! Per-frame activity extraction: align detections with graph nodes, mark
//! the people in the image, ask for behavior descriptions and activity
//! proposals, confirm out-of-view targets against each person's visible
//! entities, and upsert every confirmed activity as a graph edge.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::{Isometry3, Point3, Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::{Aabb, Vec3};
use crate::graph::{
    is_valid_frame_name, BehaviorDescription, GraphError, HumanNode, Node, NodeId, SocialSceneGraph,
};
use crate::inference::{
    infer, BehaviorPayload, InferenceBackend, InferenceError, InferenceRequest, ProposalPayload,
    SolverPayload, Stage,
};
use crate::lexicon::{FrameLexicon, LexiconError};
use crate::visibility::{
    anchor_head_pose, interaction_context_for, rigid_from_row_major, CameraIntrinsics, DepthImage,
    PixelBox, VisibilityConfig, VisibilityError, VisibilityReport,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("frame {frame_id}: {message}")]
    Mismatch { frame_id: String, message: String },
    #[error("detection {0} is a human without a mask")]
    MissingMask(usize),
    #[error("no people to describe")]
    EmptyLegend,
    #[error(transparent)]
    Visibility(#[from] VisibilityError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

// ---------------------------------------------------------------------------
// Frames

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionKind {
    Object,
    Human,
}

/// `[box, label, kind]`; the box is `[x0, y0, x1, y1]` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection(pub PixelBox, pub String, pub DetectionKind);

/// Head box and camera-frame orientation `[w, x, y, z]` for one human
/// detection, as produced by an external head-pose estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadObservation {
    pub detection: usize,
    #[serde(rename = "box")]
    pub head_box: PixelBox,
    pub orientation: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub rgb: String,
    pub depth: String,
    pub intrinsics: CameraIntrinsics,
    /// World-from-camera transform, row-major.
    pub camera_pose: [f64; 16],
    pub detections: Vec<Detection>,
    /// Per-detection mask paths, parallel to `detections`.
    #[serde(default)]
    pub masks: Vec<Option<String>>,
    #[serde(default)]
    pub head_poses: Vec<HeadObservation>,
}

/// Frame list; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub frames: Vec<FrameRecord>,
}

impl FrameManifest {
    pub fn load(path: &Path) -> Result<FrameManifest, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: FrameManifest =
            serde_json::from_str(&text).map_err(|e| PipelineError::Manifest {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let mut seen = BTreeSet::new();
        for f in &manifest.frames {
            if !seen.insert(f.frame_id.as_str()) {
                return Err(PipelineError::Manifest {
                    path: path.to_path_buf(),
                    message: format!("duplicate frame_id {}", f.frame_id),
                });
            }
            if !f.masks.is_empty() && f.masks.len() != f.detections.len() {
                return Err(PipelineError::Manifest {
                    path: path.to_path_buf(),
                    message: format!(
                        "frame {}: masks and detections differ in length",
                        f.frame_id
                    ),
                });
            }
            if let Some(h) = f
                .head_poses
                .iter()
                .find(|h| h.detection >= f.detections.len())
            {
                return Err(PipelineError::Manifest {
                    path: path.to_path_buf(),
                    message: format!(
                        "frame {}: head pose refers to detection {}",
                        f.frame_id, h.detection
                    ),
                });
            }
        }
        Ok(manifest)
    }
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn get(&self, u: u32, v: u32) -> bool {
        self.data[(v * self.width + u) as usize]
    }

    /// Nonzero luma pixels are set.
    pub fn load_png(path: &Path) -> Result<Mask, PipelineError> {
        let img = image::open(path)
            .map_err(|e| PipelineError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_luma8();
        Ok(Mask {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] > 0).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), PipelineError> {
        let buf: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width, self.height, buf)
            .expect("mask buffer matches its dimensions")
            .save(path)
            .map_err(|e| PipelineError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

/// A registered observation with its images loaded.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    pub record: FrameRecord,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub masks: Vec<Option<Mask>>,
    pub world_from_camera: Isometry3<f64>,
}

impl RgbdFrame {
    pub fn frame_id(&self) -> &str {
        &self.record.frame_id
    }

    pub fn load(record: &FrameRecord, base_dir: &Path) -> Result<RgbdFrame, PipelineError> {
        let mismatch = |message: String| PipelineError::Mismatch {
            frame_id: record.frame_id.clone(),
            message,
        };
        record.intrinsics.validate()?;
        let world_from_camera = rigid_from_row_major(&record.camera_pose)?;
        let rgb_path = base_dir.join(&record.rgb);
        let rgb = image::open(&rgb_path)
            .map_err(|e| PipelineError::Image {
                path: rgb_path.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let depth_path = base_dir.join(&record.depth);
        let depth = DepthImage::load_png(&depth_path).map_err(|e| PipelineError::Image {
            path: depth_path.clone(),
            message: e.to_string(),
        })?;
        let dims = (record.intrinsics.width, record.intrinsics.height);
        if rgb.dimensions() != dims {
            return Err(mismatch(format!(
                "rgb is {:?}, intrinsics {dims:?}",
                rgb.dimensions()
            )));
        }
        if (depth.width, depth.height) != dims {
            return Err(mismatch(format!(
                "depth is {:?}, intrinsics {dims:?}",
                (depth.width, depth.height)
            )));
        }
        let mut masks = Vec::with_capacity(record.detections.len());
        for i in 0..record.detections.len() {
            let mask = match record.masks.get(i).and_then(|m| m.as_ref()) {
                Some(rel) => {
                    let m = Mask::load_png(&base_dir.join(rel))?;
                    if (m.width, m.height) != dims {
                        return Err(mismatch(format!("mask {rel} is {:?}", (m.width, m.height))));
                    }
                    Some(m)
                }
                None => None,
            };
            masks.push(mask);
        }
        Ok(RgbdFrame {
            record: record.clone(),
            rgb,
            depth,
            masks,
            world_from_camera,
        })
    }
}

// ---------------------------------------------------------------------------
// Configuration and results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub iou_threshold: f64,
    /// Both boxes grow by this much before IoU, so planar surfaces have volume.
    pub aabb_padding: f64,
    /// Humans whose centers are closer than this are the same person.
    pub human_match_distance: f64,
    /// Voxel size used to merge human points across frames.
    pub human_voxel: f64,
    pub dilation_kernel: usize,
    pub dilation_iterations: usize,
    pub visibility: VisibilityConfig,
    /// Where annotated images are written, if anywhere.
    pub image_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.25,
            aabb_padding: 0.025,
            human_match_distance: 0.5,
            human_voxel: 0.03,
            dilation_kernel: 5,
            dilation_iterations: 3,
            visibility: VisibilityConfig::default(),
            image_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Locality {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityProposal {
    pub human_id: NodeId,
    pub target_id: Option<NodeId>,
    pub raw_label: String,
    pub frame: String,
    pub locality: Locality,
    pub source_frame_id: String,
    /// Set when the target was supplied by the remote solver.
    #[serde(default)]
    pub solved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalStatus {
    Resolved,
    Rejected,
    Errored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalOutcome {
    pub proposal: ActivityProposal,
    pub status: ProposalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame_id: String,
    pub humans: Vec<NodeId>,
    pub proposals: Vec<ProposalOutcome>,
    pub edges_upserted: usize,
    pub errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl FrameSummary {
    pub fn count(&self, status: ProposalStatus) -> usize {
        self.proposals.iter().filter(|p| p.status == status).count()
    }
}

// ---------------------------------------------------------------------------
// Alignment

/// World-frame points under a detection: mask pixels when a mask exists,
/// box pixels otherwise, at every valid depth.
pub fn detection_points(frame: &RgbdFrame, index: usize) -> Vec<Vec3> {
    let Detection(b, _, _) = &frame.record.detections[index];
    let (w, h) = (frame.depth.width, frame.depth.height);
    let u0 = b[0].max(0.0).floor() as u32;
    let v0 = b[1].max(0.0).floor() as u32;
    let u1 = (b[2].max(0.0).ceil() as u32).min(w);
    let v1 = (b[3].max(0.0).ceil() as u32).min(h);
    let mask = frame.masks.get(index).and_then(|m| m.as_ref());
    let mut out = Vec::new();
    for v in v0..v1 {
        for u in u0..u1 {
            if mask.is_some_and(|m| !m.get(u, v)) {
                continue;
            }
            let Some(z) = frame.depth.meters(u, v) else {
                continue;
            };
            let p = frame
                .record
                .intrinsics
                .back_project(f64::from(u) + 0.5, f64::from(v) + 0.5, z);
            out.push((frame.world_from_camera * Point3::from(p)).into());
        }
    }
    out
}

fn voxel_merge(existing: &[Vec3], extra: &[Vec3], voxel: f64) -> Vec<Vec3> {
    let key = |p: &Vec3| {
        (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        )
    };
    let cells: BTreeSet<_> = existing.iter().chain(extra).map(key).collect();
    cells
        .into_iter()
        .map(|(i, j, k)| {
            Vec3::new(
                (i as f64 + 0.5) * voxel,
                (j as f64 + 0.5) * voxel,
                (k as f64 + 0.5) * voxel,
            )
        })
        .collect()
}

fn refresh_human(h: &mut HumanNode, points: Vec<Vec3>) {
    h.aabb = Aabb::from_points(&points).unwrap_or(h.aabb);
    h.center = Vec3::centroid(&points).unwrap_or(h.center);
    h.points = points;
}

/// Maps detection indices to graph nodes. Objects match the object node
/// with the largest AABB IoU at or above the threshold and are dropped
/// otherwise. Humans match by IoU, then by center distance, and create a
/// new human node when neither applies; matched humans absorb the
/// detection's points and pick up a head pose when one is observed.
pub fn align_detections(
    frame: &RgbdFrame,
    graph: &mut SocialSceneGraph,
    config: &PipelineConfig,
) -> Result<BTreeMap<usize, NodeId>, PipelineError> {
    let mut out = BTreeMap::new();
    for (i, Detection(_, label, kind)) in frame.record.detections.iter().enumerate() {
        let points = detection_points(frame, i);
        let Some(aabb) = Aabb::from_points(&points).map(|b| b.inflate(config.aabb_padding)) else {
            log::warn!(
                "{}: detection {i} ({label}) has no valid depth",
                frame.frame_id()
            );
            continue;
        };
        let want_human = *kind == DetectionKind::Human;
        let mut best: Option<(f64, NodeId)> = None;
        for node in graph.nodes().filter(|n| n.is_human() == want_human) {
            let iou = node.aabb().inflate(config.aabb_padding).iou(&aabb);
            if iou >= config.iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, node.id()));
            }
        }
        let id = match (best, want_human) {
            (Some((_, id)), _) => id,
            (None, false) => {
                log::debug!(
                    "{}: object detection {i} ({label}) left unmatched",
                    frame.frame_id()
                );
                continue;
            }
            (None, true) => {
                let center = Vec3::centroid(&points).expect("points are non-empty");
                let near = graph
                    .humans()
                    .map(|h| (h.center.distance(&center), h.id))
                    .filter(|(d, _)| *d < config.human_match_distance)
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                match near {
                    Some((_, id)) => id,
                    None => {
                        let id = graph.next_id();
                        let marker = graph.next_marker_label();
                        let merged = voxel_merge(&[], &points, config.human_voxel);
                        graph.add_node(Node::Human(HumanNode::from_points(id, marker, merged)))?;
                        id
                    }
                }
            }
        };
        if want_human {
            let human = graph.human_mut(id).expect("matched human exists");
            let merged = voxel_merge(&human.points, &points, config.human_voxel);
            refresh_human(human, merged);
            if human.head_pose.is_none() {
                if let Some(obs) = frame.record.head_poses.iter().find(|h| h.detection == i) {
                    let [w, x, y, z] = obs.orientation;
                    let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
                    match anchor_head_pose(
                        &obs.head_box,
                        &q,
                        &frame.depth,
                        &frame.record.intrinsics,
                        &frame.world_from_camera,
                        frame.frame_id(),
                    ) {
                        Ok(pose) => human.head_pose = Some(pose),
                        Err(e) => {
                            log::warn!("{}: head pose for detection {i}: {e}", frame.frame_id())
                        }
                    }
                }
            }
        }
        out.insert(i, id);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Annotation

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub base_frame_id: String,
    pub image: RgbImage,
    /// Marker label to node id.
    pub legend: BTreeMap<u32, NodeId>,
    /// Name the image is referenced by in inference requests.
    pub image_ref: String,
}

impl AnnotatedImage {
    pub fn save(&self, dir: &Path) -> Result<PathBuf, PipelineError> {
        let path = dir.join(&self.image_ref);
        self.image.save(&path).map_err(|e| PipelineError::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(path)
    }
}

/// Square binary dilation with a `kernel`×`kernel` structuring element.
pub fn dilate(mask: &[bool], w: usize, h: usize, kernel: usize, iterations: usize) -> Vec<bool> {
    let r = (kernel / 2) as isize;
    let mut cur = mask.to_vec();
    for _ in 0..iterations {
        let mut next = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                'probe: for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx >= 0
                            && ny >= 0
                            && (nx as usize) < w
                            && (ny as usize) < h
                            && cur[ny as usize * w + nx as usize]
                        {
                            next[y * w + x] = true;
                            break 'probe;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Pixels of `mask` with a 4-neighbor outside it.
pub fn contour(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1]
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x];
            out[y * w + x] = edge;
        }
    }
    out
}

const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

const PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

/// Draws `n` in a 2× scaled 3×5 digit font on a black tag at `(x, y)`.
pub fn draw_number(img: &mut RgbImage, x: i64, y: i64, n: u32, color: [u8; 3]) {
    let text = n.to_string();
    let scale = 2;
    let tag_w = text.len() as i64 * 4 * scale + scale;
    let tag_h = 5 * scale + 2 * scale;
    let mut put = |px: i64, py: i64, c: [u8; 3]| {
        if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
            img.put_pixel(px as u32, py as u32, Rgb(c));
        }
    };
    for ty in 0..tag_h {
        for tx in 0..tag_w {
            put(x + tx, y + ty, [0, 0, 0]);
        }
    }
    for (k, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let gx = x + scale + k as i64 * 4 * scale;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            put(
                                gx + col * scale + sx,
                                y + scale + row as i64 * scale + sy,
                                color,
                            );
                        }
                    }
                }
            }
        }
    }
}

fn draw_box_outline(img: &mut RgbImage, b: &PixelBox, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = (b[0].floor() as i64).clamp(0, w - 1);
    let y0 = (b[1].floor() as i64).clamp(0, h - 1);
    let x1 = (b[2].ceil() as i64 - 1).clamp(0, w - 1);
    let y1 = (b[3].ceil() as i64 - 1).clamp(0, h - 1);
    for x in x0..=x1 {
        img.put_pixel(x as u32, y0 as u32, Rgb(color));
        img.put_pixel(x as u32, y1 as u32, Rgb(color));
    }
    for y in y0..=y1 {
        img.put_pixel(x0 as u32, y as u32, Rgb(color));
        img.put_pixel(x1 as u32, y as u32, Rgb(color));
    }
}

/// Outlines each person's dilated mask and tags it with the person's
/// marker. `humans` lists `(detection index, node id, marker)`.
pub fn annotate_humans(
    frame: &RgbdFrame,
    humans: &[(usize, NodeId, u32)],
    config: &PipelineConfig,
) -> Result<AnnotatedImage, PipelineError> {
    let mut image = frame.rgb.clone();
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut legend = BTreeMap::new();
    for &(det, id, marker) in humans {
        let mask = frame
            .masks
            .get(det)
            .and_then(|m| m.as_ref())
            .ok_or(PipelineError::MissingMask(det))?;
        let color = PALETTE[(marker as usize) % PALETTE.len()];
        let grown = dilate(
            &mask.data,
            w,
            h,
            config.dilation_kernel,
            config.dilation_iterations,
        );
        let edge = contour(&grown, w, h);
        for (i, _) in edge.iter().enumerate().filter(|(_, &e)| e) {
            image.put_pixel((i % w) as u32, (i / w) as u32, Rgb(color));
        }
        let b = frame.record.detections[det].0;
        draw_number(&mut image, b[0] as i64, b[1] as i64, marker, color);
        legend.insert(marker, id);
    }
    Ok(AnnotatedImage {
        base_frame_id: frame.frame_id().to_string(),
        image,
        legend,
        image_ref: format!("{}_humans.png", frame.frame_id()),
    })
}

/// The human annotation plus a box and id tag for every aligned object.
pub fn annotate_entities(
    humans_image: &AnnotatedImage,
    frame: &RgbdFrame,
    objects: &[(usize, NodeId)],
) -> AnnotatedImage {
    let mut image = humans_image.image.clone();
    for &(det, id) in objects {
        let b = frame.record.detections[det].0;
        draw_box_outline(&mut image, &b, [255, 255, 0]);
        draw_number(
            &mut image,
            b[0] as i64,
            b[3] as i64 - 14,
            id.0,
            [255, 255, 0],
        );
    }
    AnnotatedImage {
        base_frame_id: humans_image.base_frame_id.clone(),
        image,
        legend: humans_image.legend.clone(),
        image_ref: format!("{}_entities.png", frame.frame_id()),
    }
}

// ---------------------------------------------------------------------------
// Inference stages

const BEHAVIOR_PROMPT: &str = "\
Every person in the image is outlined and tagged with a numeric marker.
For each marker listed below describe the person's posture, gaze, physical state and visible attributes.
Reply with JSON {\"humans\": [{\"marker\", \"posture\", \"gaze\", \"physical_state\", \"attributes\"}]}.";

const PROPOSAL_PROMPT: &str = "\
People are tagged with markers and objects with their numeric ids; a person can also be a target through their id.
List the activities each person is doing or might be doing.
Put an activity under \"local\" when its target object is tagged in this image, and under \"remote\" when the target cannot be confirmed from this image.
Reply with JSON {\"local\": [...], \"remote\": [...]} whose items are {\"human_marker\", \"target\", \"raw_label\", \"frame\"}.";

const SOLVER_PROMPT: &str = "\
A person seems to be doing the activity in the context, but its target was not in view.
Using the entities visible from the person's viewpoint and their visible fractions, pick the most plausible target, or return no resolution if none fits.
Reply with JSON {\"resolutions\": [{\"human_id\", \"entity_id\", \"raw_label\", \"frame\", \"confidence\"}]}.";

fn round2(v: f64) -> f64 {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn center_json(p: Vec3) -> Value {
    json!([round2(p.x), round2(p.y), round2(p.z)])
}

fn people_legend(annotated: &AnnotatedImage, graph: &SocialSceneGraph) -> Vec<Value> {
    annotated
        .legend
        .iter()
        .map(|(marker, id)| {
            let c = graph.node(*id).map(|n| n.center()).unwrap_or(Vec3::ZERO);
            json!({"marker": marker, "center": center_json(c)})
        })
        .collect()
}

/// Asks for one behavior description per legend person.
pub fn describe_behaviors(
    annotated: &AnnotatedImage,
    graph: &SocialSceneGraph,
    backend: &dyn InferenceBackend,
) -> Result<BTreeMap<NodeId, BehaviorDescription>, PipelineError> {
    if annotated.legend.is_empty() {
        return Err(PipelineError::EmptyLegend);
    }
    let legend = serde_json::to_string(&people_legend(annotated, graph)).expect("json");
    let request = InferenceRequest {
        stage: Stage::BehaviorDescription,
        prompt_text: format!("{BEHAVIOR_PROMPT}\nMarkers: {legend}"),
        image_ref: Some(annotated.image_ref.clone()),
        context_json: None,
    };
    let response = infer(&request, backend)?;
    let payload: BehaviorPayload =
        serde_json::from_str(&response.payload_json).expect("validated payload parses");
    let mut violations = Vec::new();
    let mut out = BTreeMap::new();
    for item in payload.humans {
        match annotated.legend.get(&item.marker) {
            Some(id) => {
                out.insert(
                    *id,
                    BehaviorDescription {
                        posture: item.posture,
                        gaze: item.gaze,
                        physical_state: item.physical_state,
                        attributes: item.attributes,
                    },
                );
            }
            None => violations.push(format!("unknown marker {}", item.marker)),
        }
    }
    for (marker, id) in &annotated.legend {
        if !out.contains_key(id) {
            violations.push(format!("no description for marker {marker}"));
        }
    }
    if !violations.is_empty() {
        return Err(InferenceError::schema(
            Stage::BehaviorDescription,
            violations,
            &response.payload_json,
        )
        .into());
    }
    Ok(out)
}

fn proposal_frame(
    lexicon: &mut FrameLexicon,
    raw_label: &str,
    frame: Option<&str>,
) -> Result<String, PipelineError> {
    if let Some(f) = frame {
        let name = lexicon.canonical_frame_name(&f.trim().to_uppercase());
        if is_valid_frame_name(&name) {
            return Ok(name);
        }
    }
    Ok(lexicon.canonicalize(raw_label)?)
}

/// Asks for local and remote activity proposals. Markers must resolve
/// through the legend; local targets are kept as given and checked later.
pub fn propose_activities(
    frame_id: &str,
    annotated: &AnnotatedImage,
    objects: &[(NodeId, String)],
    behaviors: &BTreeMap<NodeId, BehaviorDescription>,
    graph: &SocialSceneGraph,
    lexicon: &mut FrameLexicon,
    backend: &dyn InferenceBackend,
) -> Result<Vec<ActivityProposal>, PipelineError> {
    let people: Vec<Value> = annotated
        .legend
        .iter()
        .map(|(marker, id)| {
            let c = graph.node(*id).map(|n| n.center()).unwrap_or(Vec3::ZERO);
            json!({
                "marker": marker,
                "id": id.0,
                "center": center_json(c),
                "behavior": behaviors.get(id),
            })
        })
        .collect();
    let objects_json: Vec<Value> = objects
        .iter()
        .map(|(id, class)| json!({"id": id.0, "class": class}))
        .collect();
    let request = InferenceRequest {
        stage: Stage::ActivityProposal,
        prompt_text: format!(
            "{PROPOSAL_PROMPT}\nPeople: {}\nObjects: {}",
            serde_json::to_string(&people).expect("json"),
            serde_json::to_string(&objects_json).expect("json")
        ),
        image_ref: Some(annotated.image_ref.clone()),
        context_json: None,
    };
    let response = infer(&request, backend)?;
    let payload: ProposalPayload =
        serde_json::from_str(&response.payload_json).expect("validated payload parses");
    let mut out = Vec::new();
    let mut violations = Vec::new();
    for (items, locality) in [
        (payload.local, Locality::Local),
        (payload.remote, Locality::Remote),
    ] {
        for item in items {
            let Some(&human_id) = annotated.legend.get(&item.human_marker) else {
                violations.push(format!("unknown marker {}", item.human_marker));
                continue;
            };
            let frame = proposal_frame(lexicon, &item.raw_label, item.frame.as_deref())?;
            out.push(ActivityProposal {
                human_id,
                target_id: item.target.map(NodeId),
                raw_label: item.raw_label,
                frame,
                locality,
                source_frame_id: frame_id.to_string(),
                solved: false,
            });
        }
    }
    if !violations.is_empty() {
        return Err(InferenceError::schema(
            Stage::ActivityProposal,
            violations,
            &response.payload_json,
        )
        .into());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveOutcome {
    Resolved(ActivityProposal),
    Rejected(String),
}

/// Context sent to the remote solver: the proposal, the person's behavior,
/// the visible entities with their fractions, and the compact graph
/// restricted to the person and those entities.
pub fn solver_context(
    proposal: &ActivityProposal,
    report: &VisibilityReport,
    graph: &SocialSceneGraph,
) -> String {
    let mut keep: BTreeSet<NodeId> = report.entries.iter().map(|e| e.entity_id).collect();
    keep.insert(proposal.human_id);
    let sub = graph.subgraph(&keep);
    let compact: Value = serde_json::from_str(&sub.to_compact_json(2)).expect("compact json");
    let visible: Vec<Value> = report
        .entries
        .iter()
        .map(|e| {
            json!({
                "id": e.entity_id.0,
                "class": graph.node(e.entity_id).map(|n| n.class_label()).unwrap_or(""),
                "fraction": round2(e.visible_fraction),
            })
        })
        .collect();
    let behavior = graph
        .human(proposal.human_id)
        .and_then(|h| h.behavior.clone());
    serde_json::to_string(&json!({
        "human_id": proposal.human_id.0,
        "behavior": behavior,
        "proposal": {"raw_label": proposal.raw_label, "frame": proposal.frame},
        "visible": visible,
        "graph": compact,
    }))
    .expect("json")
}

/// Confirms a remote proposal against the person's visible entities.
pub fn solve_remote(
    proposal: &ActivityProposal,
    report: &VisibilityReport,
    graph: &SocialSceneGraph,
    backend: &dyn InferenceBackend,
) -> Result<SolveOutcome, PipelineError> {
    if report.is_empty() {
        return Ok(SolveOutcome::Rejected("no visible entities".into()));
    }
    let request = InferenceRequest {
        stage: Stage::RemoteSolver,
        prompt_text: SOLVER_PROMPT.to_string(),
        image_ref: None,
        context_json: Some(solver_context(proposal, report, graph)),
    };
    let response = infer(&request, backend)?;
    let payload: SolverPayload =
        serde_json::from_str(&response.payload_json).expect("validated payload parses");
    let best = payload
        .resolutions
        .iter()
        .filter(|r| r.human_id == proposal.human_id.0)
        .max_by(|a, b| {
            a.confidence
                .total_cmp(&b.confidence)
                .then(b.entity_id.cmp(&a.entity_id))
        });
    let Some(best) = best else {
        return Ok(SolveOutcome::Rejected("solver found no target".into()));
    };
    let target = NodeId(best.entity_id);
    if report.fraction(target).is_none() {
        return Err(InferenceError::schema(
            Stage::RemoteSolver,
            vec![format!("entity {target} is not in the visibility report")],
            &response.payload_json,
        )
        .into());
    }
    Ok(SolveOutcome::Resolved(ActivityProposal {
        target_id: Some(target),
        locality: Locality::Local,
        solved: true,
        ..proposal.clone()
    }))
}

// ---------------------------------------------------------------------------
// Frame driver

/// Runs every stage on one frame and upserts confirmed activities.
/// Observations previously recorded for the same frame id are retracted
/// first, so re-running a frame leaves the graph unchanged.
pub fn run_frame(
    frame: &RgbdFrame,
    graph: &mut SocialSceneGraph,
    lexicon: &mut FrameLexicon,
    backend: &dyn InferenceBackend,
    config: &PipelineConfig,
) -> FrameSummary {
    let frame_id = frame.frame_id().to_string();
    let mut summary = FrameSummary {
        frame_id: frame_id.clone(),
        ..FrameSummary::default()
    };
    graph.retract_frame(&frame_id);
    let aligned = match align_detections(frame, graph, config) {
        Ok(a) => a,
        Err(e) => {
            summary.skipped = Some(e.to_string());
            return summary;
        }
    };
    let mut humans = Vec::new();
    let mut objects = Vec::new();
    let mut seen = BTreeSet::new();
    for (&det, &id) in &aligned {
        if !seen.insert(id) {
            continue;
        }
        match graph.node(id) {
            Some(Node::Human(h)) => humans.push((det, id, h.marker_label)),
            Some(Node::Object(o)) => objects.push((det, id, o.class_label.clone())),
            None => {}
        }
    }
    summary.humans = humans.iter().map(|h| h.1).collect();
    if humans.is_empty() {
        return summary;
    }

    let annotated = match annotate_humans(frame, &humans, config) {
        Ok(a) => a,
        Err(e) => {
            summary.errors.push(e.to_string());
            return summary;
        }
    };
    let object_pairs: Vec<(usize, NodeId)> = objects.iter().map(|o| (o.0, o.1)).collect();
    let entities = annotate_entities(&annotated, frame, &object_pairs);
    if let Some(dir) = &config.image_dir {
        for img in [&annotated, &entities] {
            if let Err(e) = img.save(dir) {
                summary.errors.push(e.to_string());
            }
        }
    }

    let behaviors = match describe_behaviors(&annotated, graph, backend) {
        Ok(b) => b,
        Err(e) => {
            summary.errors.push(format!("behavior: {e}"));
            return summary;
        }
    };
    for (id, b) in &behaviors {
        if let Some(h) = graph.human_mut(*id) {
            if !b.is_empty() {
                h.behavior = Some(b.clone());
            }
        }
    }

    let visible_objects: Vec<(NodeId, String)> =
        objects.iter().map(|o| (o.1, o.2.clone())).collect();
    let proposals = match propose_activities(
        &frame_id,
        &entities,
        &visible_objects,
        &behaviors,
        graph,
        lexicon,
        backend,
    ) {
        Ok(p) => p,
        Err(e) => {
            summary.errors.push(format!("proposal: {e}"));
            return summary;
        }
    };

    let in_frame: BTreeSet<NodeId> = objects
        .iter()
        .map(|o| o.1)
        .chain(humans.iter().map(|h| h.1))
        .collect();
    let mut confirmed = Vec::new();
    for proposal in proposals {
        let outcome = match proposal.locality {
            Locality::Local => match proposal.target_id {
                Some(t) if t != proposal.human_id && in_frame.contains(&t) => {
                    confirmed.push(proposal.clone());
                    (ProposalStatus::Resolved, None)
                }
                Some(t) if t == proposal.human_id => (
                    ProposalStatus::Rejected,
                    Some("a person cannot be their own target".to_string()),
                ),
                _ => (
                    ProposalStatus::Rejected,
                    Some("local target is not a detection in this frame".to_string()),
                ),
            },
            Locality::Remote => {
                let solved = interaction_context_for(proposal.human_id, graph, &config.visibility)
                    .map_err(PipelineError::from)
                    .and_then(|report| solve_remote(&proposal, &report, graph, backend));
                match solved {
                    Ok(SolveOutcome::Resolved(p)) => {
                        confirmed.push(p);
                        (ProposalStatus::Resolved, None)
                    }
                    Ok(SolveOutcome::Rejected(why)) => (ProposalStatus::Rejected, Some(why)),
                    Err(PipelineError::Inference(e @ InferenceError::SchemaViolation { .. })) => {
                        (ProposalStatus::Rejected, Some(e.to_string()))
                    }
                    Err(e) => (ProposalStatus::Errored, Some(e.to_string())),
                }
            }
        };
        summary.proposals.push(ProposalOutcome {
            proposal,
            status: outcome.0,
            reason: outcome.1,
        });
    }
    for p in confirmed {
        let target = p.target_id.expect("confirmed proposals have targets");
        match graph.upsert_activity_edge_from(
            p.human_id,
            target,
            &p.raw_label,
            &p.frame,
            Some(&frame_id),
        ) {
            Ok(_) => summary.edges_upserted += 1,
            Err(e) => summary.errors.push(format!("upsert: {e}")),
        }
    }
    summary
}

/// Loads and runs every frame of a manifest in order.
pub fn augment(
    manifest: &FrameManifest,
    base_dir: &Path,
    graph: &mut SocialSceneGraph,
    lexicon: &mut FrameLexicon,
    backend: &dyn InferenceBackend,
    config: &PipelineConfig,
) -> Vec<FrameSummary> {
    manifest
        .frames
        .iter()
        .map(|record| match RgbdFrame::load(record, base_dir) {
            Ok(frame) => run_frame(&frame, graph, lexicon, backend, config),
            Err(e) => FrameSummary {
                frame_id: record.frame_id.clone(),
                skipped: Some(e.to_string()),
                ..FrameSummary::default()
            },
        })
        .collect()
}
