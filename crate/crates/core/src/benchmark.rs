//! Benchmark scenes, relationship metrics and query scoring.
//!
//! A benchmark root holds one directory per scene:
//!
//! ```text
//! scene_k/cloud.ply            x y z instance
//! scene_k/frames/manifest.json frame manifest
//! scene_k/masks/               per-detection masks
//! scene_k/relationships.json   [{human_id, target_id, target_class, frame}]
//! scene_k/queries.json         [{id, text, category, gt_ids}]
//! scene_k/base_graph.json      object graph the pipeline starts from
//! ```
//!
//! plus an optional `benchmark.json` listing scenes and expected totals.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ply_rs_bw::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType,
    ScalarType,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::geometry::Vec3;
use crate::graph::{is_valid_frame_name, NodeId, SocialSceneGraph};
use crate::inference::{
    infer, InferenceBackend, InferenceError, InferenceRequest, QueryPayload, Stage,
};
use crate::lexicon::FrameLexicon;
use crate::pipeline::FrameManifest;

/// Environment variable naming a full benchmark root.
pub const ENV_BENCHMARK_ROOT: &str = "S3DSG_BENCHMARK_ROOT";

/// Edge length of the occupancy voxels used for point-cloud IoU, meters.
pub const VOXEL_SIZE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: instance {id} does not exist in the scene cloud")]
    DanglingId { path: PathBuf, id: u32 },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn read(path: &Path) -> Result<String, BenchmarkError> {
    fs::read_to_string(path).map_err(|source| BenchmarkError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, BenchmarkError> {
    serde_json::from_str(&read(path)?).map_err(|e| BenchmarkError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Ground truth

/// Instance-labelled scene cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtCloud {
    pub instances: BTreeMap<u32, Vec<Vec3>>,
}

fn scalar_f64(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => f64::from(v),
        Property::UChar(v) => f64::from(v),
        Property::Short(v) => f64::from(v),
        Property::UShort(v) => f64::from(v),
        Property::Int(v) => f64::from(v),
        Property::UInt(v) => f64::from(v),
        Property::Float(v) => f64::from(v),
        Property::Double(v) => v,
        _ => return None,
    })
}

impl GtCloud {
    /// Reads a PLY whose `vertex` element has `x`, `y`, `z` and an integer
    /// `instance` property.
    pub fn load_ply(path: &Path) -> Result<GtCloud, BenchmarkError> {
        let bad = |message: String| BenchmarkError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let file = fs::File::open(path).map_err(|source| BenchmarkError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = std::io::BufReader::new(file);
        let parser = ply_rs_bw::parser::Parser::<DefaultElement>::new();
        let ply = parser
            .read_ply(&mut reader)
            .map_err(|e| bad(e.to_string()))?;
        let vertices = ply
            .payload
            .get("vertex")
            .ok_or_else(|| bad("no vertex element".into()))?;
        let mut cloud = GtCloud::default();
        for (i, v) in vertices.iter().enumerate() {
            let get = |k: &str| {
                v.get(k)
                    .and_then(scalar_f64)
                    .ok_or_else(|| bad(format!("vertex {i}: missing or non-scalar `{k}`")))
            };
            let p = Vec3::new(get("x")?, get("y")?, get("z")?);
            let inst = get("instance")?;
            if inst < 0.0 || inst.fract() != 0.0 {
                return Err(bad(format!(
                    "vertex {i}: instance must be a non-negative integer"
                )));
            }
            if !p.is_finite() {
                return Err(bad(format!("vertex {i}: non-finite coordinate")));
            }
            cloud.instances.entry(inst as u32).or_default().push(p);
        }
        Ok(cloud)
    }

    /// Writes an ASCII PLY with double coordinates, instances in id order.
    pub fn save_ply(&self, path: &Path) -> Result<(), BenchmarkError> {
        let mut ply = Ply::<DefaultElement>::new();
        ply.header.encoding = Encoding::Ascii;
        let mut vertex = ElementDef::new("vertex".to_string());
        for k in ["x", "y", "z"] {
            vertex.properties.add(PropertyDef::new(
                k.to_string(),
                PropertyType::Scalar(ScalarType::Double),
            ));
        }
        vertex.properties.add(PropertyDef::new(
            "instance".to_string(),
            PropertyType::Scalar(ScalarType::UInt),
        ));
        ply.header.elements.add(vertex);
        let mut rows = Vec::new();
        for (id, pts) in &self.instances {
            for p in pts {
                let mut e = DefaultElement::new();
                e.insert("x".to_string(), Property::Double(p.x));
                e.insert("y".to_string(), Property::Double(p.y));
                e.insert("z".to_string(), Property::Double(p.z));
                e.insert("instance".to_string(), Property::UInt(*id));
                rows.push(e);
            }
        }
        ply.payload.insert("vertex".to_string(), rows);
        let mut file = fs::File::create(path).map_err(|source| BenchmarkError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ply_rs_bw::writer::Writer::new()
            .write_ply(&mut file, &mut ply)
            .map_err(|source| BenchmarkError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(())
    }

    pub fn points(&self, id: u32) -> &[Vec3] {
        self.instances.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthRelationship {
    pub human_id: u32,
    pub target_id: u32,
    pub target_class: String,
    pub frame: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryCategory {
    Spatial,
    Activity,
    Functional,
}

impl QueryCategory {
    pub const ALL: [QueryCategory; 3] = [
        QueryCategory::Spatial,
        QueryCategory::Activity,
        QueryCategory::Functional,
    ];

    pub fn title(&self) -> &'static str {
        match self {
            QueryCategory::Spatial => "Spatial",
            QueryCategory::Activity => "Activity",
            QueryCategory::Functional => "Functional",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkQuery {
    pub id: String,
    pub text: String,
    pub category: QueryCategory,
    pub gt_ids: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub name: String,
    pub root: PathBuf,
    pub cloud: GtCloud,
    pub frames: FrameManifest,
    pub relationships: Vec<GroundTruthRelationship>,
    pub queries: Vec<BenchmarkQuery>,
    pub base_graph: SocialSceneGraph,
}

impl SceneBundle {
    pub fn frames_dir(&self) -> PathBuf {
        self.root.join("frames")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.frames_dir().join("manifest.json")
    }

    /// Humans named by relationships or query answers.
    pub fn humans(&self) -> BTreeSet<u32> {
        self.relationships
            .iter()
            .map(|r| r.human_id)
            .chain(self.queries.iter().flat_map(|q| q.gt_ids.iter().copied()))
            .collect()
    }

    /// One point per ground-truth instance over all queries.
    pub fn query_points(&self) -> usize {
        self.queries.iter().map(|q| q.gt_ids.len()).sum()
    }
}

fn check_image_dims(path: &Path, want: (u32, u32)) -> Result<(), BenchmarkError> {
    let got = image::image_dimensions(path).map_err(|e| BenchmarkError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if got != want {
        return Err(BenchmarkError::Invalid {
            path: path.to_path_buf(),
            message: format!("image is {got:?}, frame intrinsics say {want:?}"),
        });
    }
    Ok(())
}

/// Loads one scene directory and cross-checks ids, frames and images.
pub fn load_scene(root: &Path) -> Result<SceneBundle, BenchmarkError> {
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let cloud = GtCloud::load_ply(&root.join("cloud.ply"))?;

    let rel_path = root.join("relationships.json");
    let relationships: Vec<GroundTruthRelationship> = parse_json(&rel_path)?;
    for r in &relationships {
        for id in [r.human_id, r.target_id] {
            if !cloud.instances.contains_key(&id) {
                return Err(BenchmarkError::DanglingId {
                    path: rel_path.clone(),
                    id,
                });
            }
        }
        if !is_valid_frame_name(&r.frame) {
            return Err(BenchmarkError::Invalid {
                path: rel_path.clone(),
                message: format!("invalid frame name {:?}", r.frame),
            });
        }
    }

    let q_path = root.join("queries.json");
    let queries: Vec<BenchmarkQuery> = parse_json(&q_path)?;
    let mut ids = BTreeSet::new();
    for q in &queries {
        if !ids.insert(q.id.as_str()) {
            return Err(BenchmarkError::Invalid {
                path: q_path.clone(),
                message: format!("duplicate query id {}", q.id),
            });
        }
        if q.gt_ids.is_empty() || q.gt_ids.len() > 2 {
            return Err(BenchmarkError::Invalid {
                path: q_path.clone(),
                message: format!("query {} has {} ground-truth ids", q.id, q.gt_ids.len()),
            });
        }
        if let Some(&id) = q.gt_ids.iter().find(|id| !cloud.instances.contains_key(id)) {
            return Err(BenchmarkError::DanglingId {
                path: q_path.clone(),
                id,
            });
        }
    }

    let g_path = root.join("base_graph.json");
    let base_graph =
        SocialSceneGraph::from_full_json(&read(&g_path)?).map_err(|e| BenchmarkError::Parse {
            path: g_path.clone(),
            message: e.to_string(),
        })?;

    let m_path = root.join("frames").join("manifest.json");
    let frames = FrameManifest::load(&m_path).map_err(|e| BenchmarkError::Parse {
        path: m_path.clone(),
        message: e.to_string(),
    })?;
    let frames_dir = root.join("frames");
    for f in &frames.frames {
        let dims = (f.intrinsics.width, f.intrinsics.height);
        check_image_dims(&frames_dir.join(&f.rgb), dims)?;
        check_image_dims(&frames_dir.join(&f.depth), dims)?;
        for m in f.masks.iter().flatten() {
            check_image_dims(&frames_dir.join(m), dims)?;
        }
    }

    Ok(SceneBundle {
        name,
        root: root.to_path_buf(),
        cloud,
        frames,
        relationships,
        queries,
        base_graph,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    pub humans: usize,
    pub relationships: usize,
    pub queries: usize,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub name: String,
    pub scenes: Vec<String>,
    #[serde(default)]
    pub expected: Option<ExpectedCounts>,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub root: PathBuf,
    pub manifest: Option<BenchmarkManifest>,
    pub scenes: Vec<SceneBundle>,
}

/// Loads the scenes named in `benchmark.json`, or every subdirectory with a
/// `relationships.json` in name order when there is no manifest.
pub fn load_benchmark(root: &Path) -> Result<Benchmark, BenchmarkError> {
    let m_path = root.join("benchmark.json");
    let manifest: Option<BenchmarkManifest> = if m_path.exists() {
        Some(parse_json(&m_path)?)
    } else {
        None
    };
    let names = match &manifest {
        Some(m) => m.scenes.clone(),
        None => {
            let entries = fs::read_dir(root).map_err(|source| BenchmarkError::Io {
                path: root.to_path_buf(),
                source,
            })?;
            let mut names: Vec<String> = entries
                .filter_map(Result::ok)
                .filter(|e| e.path().join("relationships.json").is_file())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            names
        }
    };
    let scenes = names
        .iter()
        .map(|n| load_scene(&root.join(n)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Benchmark {
        root: root.to_path_buf(),
        manifest,
        scenes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub name: String,
    pub frames: usize,
    pub humans: usize,
    pub relationships: usize,
    pub activity_types: usize,
    pub queries: BTreeMap<QueryCategory, usize>,
    pub query_total: usize,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkStats {
    pub scenes: Vec<SceneStats>,
    pub total: SceneStats,
}

impl Benchmark {
    pub fn stats(&self) -> BenchmarkStats {
        let mut scenes = Vec::new();
        let mut all_frames = BTreeSet::new();
        let mut total = SceneStats {
            name: "Total".into(),
            frames: 0,
            humans: 0,
            relationships: 0,
            activity_types: 0,
            queries: BTreeMap::new(),
            query_total: 0,
            points: 0,
        };
        for s in &self.scenes {
            let kinds: BTreeSet<&str> = s.relationships.iter().map(|r| r.frame.as_str()).collect();
            all_frames.extend(kinds.iter().map(|k| k.to_string()));
            let mut queries = BTreeMap::new();
            for q in &s.queries {
                *queries.entry(q.category).or_insert(0) += 1;
                *total.queries.entry(q.category).or_insert(0) += 1;
            }
            let row = SceneStats {
                name: s.name.clone(),
                frames: s.frames.frames.len(),
                humans: s.humans().len(),
                relationships: s.relationships.len(),
                activity_types: kinds.len(),
                queries,
                query_total: s.queries.len(),
                points: s.query_points(),
            };
            total.frames += row.frames;
            total.humans += row.humans;
            total.relationships += row.relationships;
            total.query_total += row.query_total;
            total.points += row.points;
            scenes.push(row);
        }
        total.activity_types = all_frames.len();
        BenchmarkStats { scenes, total }
    }

    /// Compares totals with the manifest's expected counts, if any.
    pub fn check_expected(&self) -> Result<(), Vec<String>> {
        let Some(exp) = self.manifest.as_ref().and_then(|m| m.expected) else {
            return Ok(());
        };
        let t = self.stats().total;
        let mut out = Vec::new();
        for (what, want, got) in [
            ("humans", exp.humans, t.humans),
            ("relationships", exp.relationships, t.relationships),
            ("queries", exp.queries, t.query_total),
            ("points", exp.points, t.points),
        ] {
            if want != got {
                out.push(format!("{what}: expected {want}, found {got}"));
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

pub fn render_stats_table(stats: &BenchmarkStats) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>10} {:>7} {:>6}",
        "Map",
        "Frames",
        "Humans",
        "Rels",
        "Types",
        "Spatial",
        "Activity",
        "Functional",
        "Queries",
        "Points"
    );
    for row in stats.scenes.iter().chain(std::iter::once(&stats.total)) {
        let q = |c| row.queries.get(&c).copied().unwrap_or(0);
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>10} {:>7} {:>6}",
            row.name,
            row.frames,
            row.humans,
            row.relationships,
            row.activity_types,
            q(QueryCategory::Spatial),
            q(QueryCategory::Activity),
            q(QueryCategory::Functional),
            row.query_total,
            row.points
        );
    }
    s
}

// ---------------------------------------------------------------------------
// Geometry

pub type VoxelSet = HashSet<(i64, i64, i64)>;

pub fn voxelize(points: &[Vec3], voxel: f64) -> VoxelSet {
    points
        .iter()
        .map(|p| {
            (
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            )
        })
        .collect()
}

/// Occupancy IoU; two empty sets score 0.
pub fn voxel_iou(a: &VoxelSet, b: &VoxelSet) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Maximum-cardinality matching in a bipartite graph given as per-left
/// candidate lists in preference order. Left vertices are tried in the
/// given order. Returns `right[i]` for each left vertex.
pub fn max_matching(candidates: &[Vec<usize>], right_count: usize) -> Vec<Option<usize>> {
    fn augment(
        i: usize,
        candidates: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &j in &candidates[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, candidates, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; right_count];
    for i in 0..candidates.len() {
        let mut seen = vec![false; right_count];
        augment(i, candidates, &mut seen, &mut owner);
    }
    let mut out = vec![None; candidates.len()];
    for (j, o) in owner.iter().enumerate() {
        if let Some(i) = o {
            out[*i] = Some(j);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Relationship metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub max_candidates: usize,
    pub voxel_size: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.10,
            max_candidates: 2,
            voxel_size: VOXEL_SIZE,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(format!(
                "iou_threshold {} outside (0, 1]",
                self.iou_threshold
            ));
        }
        if self.max_candidates == 0 {
            return Err("max_candidates must be positive".into());
        }
        if self.voxel_size.is_nan() || self.voxel_size <= 0.0 {
            return Err("voxel_size must be positive".into());
        }
        Ok(())
    }
}

/// Precision, recall and F1 in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Metrics {
        let ratio = |n: usize, d: usize| {
            if d == 0 {
                None
            } else {
                Some(100.0 * n as f64 / d as f64)
            }
        };
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            undefined: p.is_none() || r.is_none(),
        }
    }
}

/// A predicted activity edge with its endpoint clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedRelationship {
    pub from_id: NodeId,
    pub to_id: NodeId,
    pub target_class: String,
    pub frame: String,
    pub human_voxels: VoxelSet,
    pub target_voxels: VoxelSet,
}

pub fn predictions_from_graph(graph: &SocialSceneGraph, voxel: f64) -> Vec<PredictedRelationship> {
    graph
        .activity_edges()
        .filter_map(|e| {
            let h = graph.node(e.from_id)?;
            let t = graph.node(e.to_id)?;
            Some(PredictedRelationship {
                from_id: e.from_id,
                to_id: e.to_id,
                target_class: t.class_label().to_string(),
                frame: e.frame.clone(),
                human_voxels: voxelize(h.points(), voxel),
                target_voxels: voxelize(t.points(), voxel),
            })
        })
        .collect()
}

/// Per ground-truth relationship, the voxelized endpoint clouds and the
/// canonical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GtEdge {
    pub human_voxels: VoxelSet,
    pub target_voxels: VoxelSet,
    pub target_class: String,
    pub frame: String,
}

pub fn gt_edges(scene: &SceneBundle, lexicon: &FrameLexicon, voxel: f64) -> Vec<GtEdge> {
    scene
        .relationships
        .iter()
        .map(|r| GtEdge {
            human_voxels: voxelize(scene.cloud.points(r.human_id), voxel),
            target_voxels: voxelize(scene.cloud.points(r.target_id), voxel),
            target_class: r.target_class.clone(),
            frame: lexicon.canonical_frame_name(&r.frame),
        })
        .collect()
}

/// IoU score of a prediction against a ground-truth edge when all three
/// conditions hold: both endpoints overlap at or above the threshold, the
/// target classes agree ignoring case, and the frames are equal.
pub fn match_score(pred: &PredictedRelationship, gt: &GtEdge, config: &EvalConfig) -> Option<f64> {
    if !pred.target_class.eq_ignore_ascii_case(&gt.target_class) || pred.frame != gt.frame {
        return None;
    }
    let h = voxel_iou(&pred.human_voxels, &gt.human_voxels);
    let t = voxel_iou(&pred.target_voxels, &gt.target_voxels);
    (h >= config.iou_threshold && t >= config.iou_threshold).then_some(h.min(t))
}

/// One-to-one assignment of predictions to ground truth maximizing the
/// number of matches. Candidates are tried in descending IoU, so when the
/// eligible pairs do not conflict this is the greedy assignment.
pub fn match_relationships(
    preds: &[PredictedRelationship],
    gts: &[GtEdge],
    config: &EvalConfig,
) -> Vec<Option<usize>> {
    let mut scored: Vec<Vec<(f64, usize)>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .enumerate()
                .filter_map(|(j, g)| match_score(p, g, config).map(|s| (s, j)))
                .collect()
        })
        .collect();
    for s in &mut scored {
        s.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    let best = |i: usize| scored[i].first().map(|s| s.0).unwrap_or(-1.0);
    order.sort_by(|&a, &b| best(b).total_cmp(&best(a)).then(a.cmp(&b)));
    let lists: Vec<Vec<usize>> = order
        .iter()
        .map(|&i| scored[i].iter().map(|s| s.1).collect())
        .collect();
    let assigned = max_matching(&lists, gts.len());
    let mut out = vec![None; preds.len()];
    for (k, &i) in order.iter().enumerate() {
        out[i] = assigned[k];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameTally {
    pub gt: usize,
    pub predicted: usize,
    pub tp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub from_id: NodeId,
    pub to_id: NodeId,
    pub frame: String,
    pub gt_human_id: u32,
    pub gt_target_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub map: String,
    pub metrics: Metrics,
    pub per_frame: BTreeMap<String, FrameTally>,
    #[serde(default)]
    pub matches: Vec<MatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MapRow>,
    pub total: Metrics,
    pub per_frame: BTreeMap<String, FrameTally>,
}

impl MetricsReport {
    /// Totals pool the per-map counts.
    pub fn from_rows(rows: Vec<MapRow>) -> MetricsReport {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        let mut per_frame: BTreeMap<String, FrameTally> = BTreeMap::new();
        for r in &rows {
            tp += r.metrics.tp;
            fp += r.metrics.fp;
            fn_ += r.metrics.fn_;
            for (k, t) in &r.per_frame {
                let e = per_frame.entry(k.clone()).or_default();
                e.gt += t.gt;
                e.predicted += t.predicted;
                e.tp += t.tp;
            }
        }
        MetricsReport {
            rows,
            total: Metrics::from_counts(tp, fp, fn_),
            per_frame,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization is infallible");
        s.push('\n');
        s
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>6} {:>6} {:>4} {:>4} {:>4}",
            "Map", "P", "R", "F1", "TP", "FP", "FN"
        );
        let mut line = |name: &str, m: &Metrics| {
            let _ = writeln!(
                s,
                "{:<12} {:>6.1} {:>6.1} {:>6.1} {:>4} {:>4} {:>4}{}",
                name,
                m.precision,
                m.recall,
                m.f1,
                m.tp,
                m.fp,
                m.fn_,
                if m.undefined { "  *" } else { "" }
            );
        };
        for r in &self.rows {
            line(&r.map, &r.metrics);
        }
        line("Total", &self.total);
        s
    }
}

/// Scores a consolidated prediction graph against one scene.
pub fn evaluate_relationships(
    graph: &SocialSceneGraph,
    scene: &SceneBundle,
    lexicon: &FrameLexicon,
    config: &EvalConfig,
) -> MapRow {
    let preds = predictions_from_graph(graph, config.voxel_size);
    let gts = gt_edges(scene, lexicon, config.voxel_size);
    let assigned = match_relationships(&preds, &gts, config);
    let mut per_frame: BTreeMap<String, FrameTally> = BTreeMap::new();
    for g in &gts {
        per_frame.entry(g.frame.clone()).or_default().gt += 1;
    }
    let mut matches = Vec::new();
    for (p, a) in preds.iter().zip(&assigned) {
        let t = per_frame.entry(p.frame.clone()).or_default();
        t.predicted += 1;
        if let Some(j) = a {
            t.tp += 1;
            let r = &scene.relationships[*j];
            matches.push(MatchRecord {
                from_id: p.from_id,
                to_id: p.to_id,
                frame: p.frame.clone(),
                gt_human_id: r.human_id,
                gt_target_id: r.target_id,
            });
        }
    }
    let tp = matches.len();
    MapRow {
        map: scene.name.clone(),
        metrics: Metrics::from_counts(tp, preds.len() - tp, gts.len() - tp),
        per_frame,
        matches,
    }
}

// ---------------------------------------------------------------------------
// Queries

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub category: QueryCategory,
    pub points: usize,
    pub possible: usize,
    #[serde(default)]
    pub truncated: bool,
}

/// Points for one query: each ground-truth instance earns a point when a
/// distinct candidate overlaps it at or above the threshold.
pub fn score_query(
    query: &BenchmarkQuery,
    candidates: &[NodeId],
    scene: &SceneBundle,
    graph: &SocialSceneGraph,
    config: &EvalConfig,
) -> QueryResult {
    let truncated = candidates.len() > config.max_candidates;
    if truncated {
        log::warn!(
            "query {}: {} candidates, scoring the first {}",
            query.id,
            candidates.len(),
            config.max_candidates
        );
    }
    let gt: Vec<VoxelSet> = query
        .gt_ids
        .iter()
        .map(|id| voxelize(scene.cloud.points(*id), config.voxel_size))
        .collect();
    let lists: Vec<Vec<usize>> = candidates
        .iter()
        .take(config.max_candidates)
        .map(|c| {
            let vox = graph
                .node(*c)
                .map(|n| voxelize(n.points(), config.voxel_size))
                .unwrap_or_default();
            let mut hits: Vec<(f64, usize)> = gt
                .iter()
                .enumerate()
                .map(|(j, g)| (voxel_iou(&vox, g), j))
                .filter(|(iou, _)| *iou >= config.iou_threshold)
                .collect();
            hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            hits.into_iter().map(|h| h.1).collect()
        })
        .collect();
    let points = max_matching(&lists, gt.len()).iter().flatten().count();
    QueryResult {
        id: query.id.clone(),
        category: query.category,
        points,
        possible: query.gt_ids.len(),
        truncated,
    }
}

pub fn score_queries(
    answers: &BTreeMap<String, Vec<NodeId>>,
    scene: &SceneBundle,
    graph: &SocialSceneGraph,
    config: &EvalConfig,
) -> Vec<QueryResult> {
    scene
        .queries
        .iter()
        .map(|q| {
            let c = answers.get(&q.id).map(Vec::as_slice).unwrap_or(&[]);
            score_query(q, c, scene, graph, config)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub points: usize,
    pub possible: usize,
    /// Percent of possible points.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub categories: BTreeMap<QueryCategory, CategoryScore>,
    /// Unweighted mean of the category ratios.
    pub mean: f64,
    pub points: usize,
    pub possible: usize,
    /// Percent of all possible points.
    pub overall: f64,
}

impl QueryScores {
    /// `counts` holds `(category, points, possible)`; repeated categories
    /// are pooled. Categories with nothing possible are left out of the
    /// mean.
    pub fn from_counts(counts: &[(QueryCategory, usize, usize)]) -> QueryScores {
        let mut pooled: BTreeMap<QueryCategory, (usize, usize)> = BTreeMap::new();
        for &(c, p, n) in counts {
            let e = pooled.entry(c).or_default();
            e.0 += p;
            e.1 += n;
        }
        let pct = |p: usize, n: usize| {
            if n == 0 {
                0.0
            } else {
                100.0 * p as f64 / n as f64
            }
        };
        let categories: BTreeMap<_, _> = pooled
            .iter()
            .map(|(&c, &(p, n))| {
                (
                    c,
                    CategoryScore {
                        points: p,
                        possible: n,
                        ratio: pct(p, n),
                    },
                )
            })
            .collect();
        let scored: Vec<f64> = categories
            .values()
            .filter(|c| c.possible > 0)
            .map(|c| c.ratio)
            .collect();
        let mean = if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        };
        let points = pooled.values().map(|v| v.0).sum();
        let possible = pooled.values().map(|v| v.1).sum();
        QueryScores {
            categories,
            mean,
            points,
            possible,
            overall: pct(points, possible),
        }
    }

    pub fn from_results(results: &[QueryResult]) -> QueryScores {
        let counts: Vec<_> = results
            .iter()
            .map(|r| (r.category, r.points, r.possible))
            .collect();
        QueryScores::from_counts(&counts)
    }

    pub fn ratio(&self, c: QueryCategory) -> f64 {
        self.categories.get(&c).map(|s| s.ratio).unwrap_or(0.0)
    }

    pub fn render_table(&self, method: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>8} {:>10} {:>6} {:>9}",
            "Method", "Spatial", "Activity", "Functional", "Mean", "Pts"
        );
        let _ = writeln!(
            s,
            "{:<12} {:>8.1} {:>8.1} {:>10.1} {:>6.1} {:>9}",
            method,
            self.ratio(QueryCategory::Spatial),
            self.ratio(QueryCategory::Activity),
            self.ratio(QueryCategory::Functional),
            self.mean,
            format!("{}/{}", self.points, self.possible)
        );
        s
    }
}

const QUERY_PROMPT: &str = "\
The context is a scene graph: nodes are [id, class, [x, y, z]], edges are [from, to, FRAME], and each glossary record explains one FRAME.
Answer the question with the ids of at most two people, best match first.
Reply with JSON {\"candidates\": [id, ...]}.";

/// Asks the query stage for each scene query. Candidate lists longer than
/// `max_candidates` are cut with a warning; ids absent from the graph are
/// dropped.
pub fn answer_queries_llm(
    scene: &SceneBundle,
    graph: &SocialSceneGraph,
    backend: &dyn InferenceBackend,
    config: &EvalConfig,
) -> Result<BTreeMap<String, Vec<NodeId>>, InferenceError> {
    let context = graph.to_compact_json(2);
    let mut out = BTreeMap::new();
    for q in &scene.queries {
        let request = InferenceRequest {
            stage: Stage::QueryAnswer,
            prompt_text: format!("{QUERY_PROMPT}\nQuestion: {}", q.text),
            image_ref: None,
            context_json: Some(context.clone()),
        };
        let raw = match infer(&request, backend) {
            Ok(r) => r.payload_json,
            // An over-long list is still usable once cut to size.
            Err(InferenceError::SchemaViolation {
                stage: Stage::QueryAnswer,
                raw,
                violations,
            }) if serde_json::from_str::<QueryPayload>(&raw).is_ok() => {
                log::warn!("query {}: {violations:?}", q.id);
                raw
            }
            Err(e) => return Err(e),
        };
        let payload: QueryPayload = serde_json::from_str(&raw)
            .map_err(|e| InferenceError::schema(Stage::QueryAnswer, vec![e.to_string()], &raw))?;
        let mut ids = Vec::new();
        for c in payload.candidates {
            let id = NodeId(c);
            if graph.node(id).is_none() {
                log::warn!("query {}: dropping unknown node {id}", q.id);
                continue;
            }
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        if ids.len() > config.max_candidates {
            log::warn!(
                "query {}: keeping the first {} candidates",
                q.id,
                config.max_candidates
            );
            ids.truncate(config.max_candidates);
        }
        out.insert(q.id.clone(), ids);
    }
    Ok(out)
}

/// Prompt and context the query stage receives for `query`, for scenario
/// authoring.
pub fn query_request(query: &BenchmarkQuery, graph: &SocialSceneGraph) -> InferenceRequest {
    InferenceRequest {
        stage: Stage::QueryAnswer,
        prompt_text: format!("{QUERY_PROMPT}\nQuestion: {}", query.text),
        image_ref: None,
        context_json: Some(graph.to_compact_json(2)),
    }
}

/// JSON document bundling per-query results and aggregate scores.
pub fn query_report_json(results: &BTreeMap<String, Vec<QueryResult>>) -> String {
    let all: Vec<QueryResult> = results.values().flatten().cloned().collect();
    let mut s = serde_json::to_string_pretty(&json!({
        "scenes": results,
        "scores": QueryScores::from_results(&all),
    }))
    .expect("json");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(origin: (f64, f64, f64), n: usize) -> Vec<Vec3> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    v.push(Vec3::new(
                        origin.0 + (i as f64 + 0.5) * VOXEL_SIZE,
                        origin.1 + (j as f64 + 0.5) * VOXEL_SIZE,
                        origin.2 + (k as f64 + 0.5) * VOXEL_SIZE,
                    ));
                }
            }
        }
        v
    }

    #[test]
    fn metrics_from_counts() {
        let m = Metrics::from_counts(10, 7, 3);
        assert!((m.precision - 58.8).abs() < 0.1);
        assert!((m.recall - 76.9).abs() < 0.1);
        assert!((m.f1 - 66.7).abs() < 0.1);
        assert!(!m.undefined);
        let e = Metrics::from_counts(0, 0, 5);
        assert_eq!((e.precision, e.recall, e.f1), (0.0, 0.0, 0.0));
        assert!(e.undefined);
        let id = Metrics::from_counts(4, 0, 0);
        assert_eq!((id.precision, id.recall, id.f1), (100.0, 100.0, 100.0));
    }

    #[test]
    fn voxel_iou_counts_cells() {
        let a = voxelize(&cube((0.0, 0.0, 0.0), 2), VOXEL_SIZE);
        let b = voxelize(&cube((VOXEL_SIZE, 0.0, 0.0), 2), VOXEL_SIZE);
        assert_eq!(a.len(), 8);
        assert!((voxel_iou(&a, &b) - 4.0 / 12.0).abs() < 1e-12);
        assert_eq!(voxel_iou(&a, &a), 1.0);
        assert_eq!(voxel_iou(&VoxelSet::new(), &VoxelSet::new()), 0.0);
    }

    fn pred(h: &[Vec3], t: &[Vec3], class: &str, frame: &str) -> PredictedRelationship {
        PredictedRelationship {
            from_id: NodeId(0),
            to_id: NodeId(1),
            target_class: class.into(),
            frame: frame.into(),
            human_voxels: voxelize(h, VOXEL_SIZE),
            target_voxels: voxelize(t, VOXEL_SIZE),
        }
    }

    fn gt(h: &[Vec3], t: &[Vec3], class: &str, frame: &str) -> GtEdge {
        GtEdge {
            human_voxels: voxelize(h, VOXEL_SIZE),
            target_voxels: voxelize(t, VOXEL_SIZE),
            target_class: class.into(),
            frame: frame.into(),
        }
    }

    #[test]
    fn identity_and_frame_mismatch() {
        let h = cube((0.0, 0.0, 0.0), 3);
        let t = cube((1.0, 0.0, 0.0), 3);
        let cfg = EvalConfig::default();
        let g = gt(&h, &t, "Sofa", "SPEAK");
        assert!(match_score(&pred(&h, &t, "sofa", "SPEAK"), &g, &cfg).is_some());
        assert!(match_score(&pred(&h, &t, "sofa", "SEE"), &g, &cfg).is_none());
        assert!(match_score(&pred(&h, &t, "chair", "SPEAK"), &g, &cfg).is_none());
    }

    #[test]
    fn iou_threshold_is_inclusive_and_straddled() {
        // 100 GT voxels in a row; a prediction sharing k of them and adding
        // none scores k/100.
        let line = |a: usize, b: usize| -> Vec<Vec3> {
            (a..b)
                .map(|i| Vec3::new((i as f64 + 0.5) * VOXEL_SIZE, 0.025, 0.025))
                .collect()
        };
        let h = line(0, 100);
        let g = gt(&h, &h, "chair", "SIT");
        let cfg = EvalConfig::default();
        assert!(match_score(&pred(&line(0, 9), &h, "chair", "SIT"), &g, &cfg).is_none());
        assert!(match_score(&pred(&line(0, 10), &h, "chair", "SIT"), &g, &cfg).is_some());
        assert!(match_score(&pred(&line(0, 11), &h, "chair", "SIT"), &g, &cfg).is_some());
    }

    #[test]
    fn matching_is_one_to_one() {
        let h = cube((0.0, 0.0, 0.0), 2);
        let t = cube((1.0, 0.0, 0.0), 2);
        let preds = vec![pred(&h, &t, "tv", "SEE"), pred(&h, &t, "tv", "SEE")];
        let gts = vec![gt(&h, &t, "tv", "SEE")];
        let m = match_relationships(&preds, &gts, &EvalConfig::default());
        assert_eq!(m.iter().flatten().count(), 1);
    }

    #[test]
    fn matching_finds_augmenting_assignment() {
        // p0 fits g0 best but also g1; p1 fits only g0.
        let a = cube((0.0, 0.0, 0.0), 4);
        let mut a_wide = a.clone();
        a_wide.extend(cube((0.2, 0.0, 0.0), 1));
        let t = cube((1.0, 0.0, 0.0), 2);
        let preds = vec![pred(&a, &t, "tv", "SEE"), pred(&a_wide, &t, "tv", "SEE")];
        let gts = vec![gt(&a, &t, "tv", "SEE"), gt(&a_wide, &t, "tv", "SEE")];
        let m = match_relationships(&preds, &gts, &EvalConfig::default());
        assert_eq!(m.iter().flatten().count(), 2);
        assert_eq!(m[0], Some(0));
    }

    #[test]
    fn query_scores_and_table() {
        let s = QueryScores::from_counts(&[
            (QueryCategory::Spatial, 1, 2),
            (QueryCategory::Activity, 2, 2),
            (QueryCategory::Functional, 0, 1),
        ]);
        assert_eq!(s.ratio(QueryCategory::Spatial), 50.0);
        assert!((s.mean - 50.0).abs() < 1e-12);
        assert_eq!((s.points, s.possible), (3, 5));
        assert!(s.render_table("ours").contains("3/5"));
        let empty = QueryScores::from_counts(&[]);
        assert_eq!(empty.mean, 0.0);
    }

    #[test]
    fn report_table_and_totals() {
        let row = |name: &str, tp, fp, fn_| MapRow {
            map: name.into(),
            metrics: Metrics::from_counts(tp, fp, fn_),
            per_frame: BTreeMap::new(),
            matches: vec![],
        };
        let r = MetricsReport::from_rows(vec![row("a", 1, 1, 0), row("b", 1, 0, 1)]);
        assert_eq!((r.total.tp, r.total.fp, r.total.fn_), (2, 1, 1));
        let t = r.render_table();
        assert!(t.lines().last().unwrap().starts_with("Total"));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn ply_round_trip() {
        let dir = std::env::temp_dir().join(format!("s3dsg-ply-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.ply");
        let mut c = GtCloud::default();
        c.instances
            .insert(3, vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 2.0, 0.5)]);
        c.instances.insert(7, vec![Vec3::new(1.0 / 3.0, 0.0, 0.0)]);
        c.save_ply(&path).unwrap();
        assert_eq!(GtCloud::load_ply(&path).unwrap(), c);
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n",
        )
        .unwrap();
        assert!(GtCloud::load_ply(&path).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn max_matching_small() {
        let m = max_matching(&[vec![0, 1], vec![0]], 2);
        assert_eq!(m, vec![Some(1), Some(0)]);
        let m = max_matching(&[vec![], vec![0], vec![0]], 1);
        assert_eq!(m.iter().flatten().count(), 1);
    }
}
