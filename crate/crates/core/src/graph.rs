//! Social 3D scene graph: object and human nodes connected by spatial and
//! activity edges over one world frame, plus the full-fidelity and compact
//! JSON encodings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Vec3};

/// Schema tag written into the `meta` block of full-fidelity graph files.
pub const GRAPH_SCHEMA: &str = "s3dsg-1";

/// Class label used for human nodes in compact output and evaluation.
pub const HUMAN_CLASS: &str = "person";

/// Identifier shared by objects and humans.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node id {0} already present")]
    DuplicateId(NodeId),
    #[error("unknown node id {0}")]
    UnknownId(NodeId),
    #[error("activity edge source {0} is not a human")]
    NonHumanSource(NodeId),
    #[error("invalid frame name {0:?}: expected uppercase ASCII")]
    InvalidFrame(String),
    #[error("invalid node {id}: {reason}")]
    InvalidNode { id: NodeId, reason: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

/// Head position and orientation. The gaze axis is the local -z of the
/// head frame, with +y pointing up out of the crown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    pub centroid: Vec3,
    pub orientation: UnitQuaternion<f64>,
    pub source_frame_id: String,
}

impl HeadPose {
    /// Pose whose gaze points from `centroid` toward `target`, with the head's
    /// up axis as close to `world_up` as possible.
    pub fn looking_at(centroid: Vec3, target: Vec3, world_up: Vec3, frame_id: &str) -> HeadPose {
        let dir = target.to_vector() - centroid.to_vector();
        // face_towards aligns local +z with the given direction; the gaze axis is -z.
        let orientation = UnitQuaternion::face_towards(&(-dir), &world_up.to_vector());
        HeadPose {
            centroid,
            orientation,
            source_frame_id: frame_id.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BehaviorDescription {
    pub posture: String,
    pub gaze: String,
    pub physical_state: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

impl BehaviorDescription {
    pub fn is_empty(&self) -> bool {
        self.posture.trim().is_empty()
            && self.gaze.trim().is_empty()
            && self.physical_state.trim().is_empty()
            && self.attributes.iter().all(|a| a.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityNode {
    pub id: NodeId,
    pub class_label: String,
    pub center: Vec3,
    pub points: Vec<Vec3>,
    pub aabb: Aabb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl EntityNode {
    /// Builds a node whose center and box are derived from its points.
    pub fn from_points(id: NodeId, class_label: &str, points: Vec<Vec3>) -> EntityNode {
        let aabb = Aabb::from_points(&points).unwrap_or(Aabb::new(Vec3::ZERO, Vec3::ZERO));
        let center = Vec3::centroid(&points).unwrap_or(Vec3::ZERO);
        EntityNode {
            id,
            class_label: class_label.to_string(),
            center,
            points,
            aabb,
            caption: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanNode {
    pub id: NodeId,
    pub marker_label: u32,
    pub center: Vec3,
    pub points: Vec<Vec3>,
    pub aabb: Aabb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_pose: Option<HeadPose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<BehaviorDescription>,
}

impl HumanNode {
    pub fn from_points(id: NodeId, marker_label: u32, points: Vec<Vec3>) -> HumanNode {
        let aabb = Aabb::from_points(&points).unwrap_or(Aabb::new(Vec3::ZERO, Vec3::ZERO));
        let center = Vec3::centroid(&points).unwrap_or(Vec3::ZERO);
        HumanNode {
            id,
            marker_label,
            center,
            points,
            aabb,
            head_pose: None,
            behavior: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Object(EntityNode),
    Human(HumanNode),
}

impl Node {
    pub fn id(&self) -> NodeId {
        match self {
            Node::Object(n) => n.id,
            Node::Human(n) => n.id,
        }
    }

    pub fn class_label(&self) -> &str {
        match self {
            Node::Object(n) => &n.class_label,
            Node::Human(_) => HUMAN_CLASS,
        }
    }

    pub fn center(&self) -> Vec3 {
        match self {
            Node::Object(n) => n.center,
            Node::Human(n) => n.center,
        }
    }

    pub fn points(&self) -> &[Vec3] {
        match self {
            Node::Object(n) => &n.points,
            Node::Human(n) => &n.points,
        }
    }

    pub fn aabb(&self) -> Aabb {
        match self {
            Node::Object(n) => n.aabb,
            Node::Human(n) => n.aabb,
        }
    }

    pub fn is_human(&self) -> bool {
        matches!(self, Node::Human(_))
    }

    pub fn as_human(&self) -> Option<&HumanNode> {
        match self {
            Node::Human(h) => Some(h),
            Node::Object(_) => None,
        }
    }

    fn validate(&self) -> Result<(), GraphError> {
        let id = self.id();
        let bad = |reason: &str| GraphError::InvalidNode {
            id,
            reason: reason.to_string(),
        };
        let points = self.points();
        if points.is_empty() {
            return Err(bad("empty point cloud"));
        }
        if points.iter().any(|p| !p.is_finite()) || !self.center().is_finite() {
            return Err(bad("non-finite coordinate"));
        }
        let aabb = self.aabb();
        // Centroids of coplanar points can land an ulp outside a flat box.
        if !aabb.inflate(1e-9).contains(&self.center()) {
            return Err(bad("center outside aabb"));
        }
        if let Some(tight) = Aabb::from_points(points) {
            if !aabb.encloses(&tight) {
                return Err(bad("aabb does not enclose all points"));
            }
        }
        if let Node::Human(h) = self {
            if let Some(b) = &h.behavior {
                if b.is_empty() {
                    return Err(bad("behavior description with all fields empty"));
                }
            }
            if let Some(pose) = &h.head_pose {
                let q = pose.orientation.quaternion();
                if (q.norm() - 1.0).abs() > 1e-6 {
                    return Err(bad("head orientation is not a unit quaternion"));
                }
                if !h.aabb.inflate(0.2).contains(&pose.centroid) {
                    return Err(bad("head centroid outside inflated aabb"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialEdge {
    pub from_id: NodeId,
    pub to_id: NodeId,
    pub relation_label: String,
}

/// One open-vocabulary observation absorbed into an activity edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLabel {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_frame_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityEdge {
    pub from_id: NodeId,
    pub to_id: NodeId,
    pub frame: String,
    pub raw_labels: Vec<RawLabel>,
    pub detection_count: u32,
}

impl ActivityEdge {
    pub fn key(&self) -> EdgeKey {
        EdgeKey {
            from_id: self.from_id,
            to_id: self.to_id,
            frame: self.frame.clone(),
        }
    }
}

/// Identity of an activity edge: at most one edge per triple.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeKey {
    pub from_id: NodeId,
    pub to_id: NodeId,
    pub frame: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGlossaryEntry {
    pub frame: String,
    pub description: String,
    pub gloss: String,
    pub example_actions: Vec<String>,
}

impl FrameGlossaryEntry {
    /// Placeholder entry for a frame with no lexicon record.
    pub fn minimal(frame: &str) -> FrameGlossaryEntry {
        let verb = frame.to_ascii_lowercase();
        FrameGlossaryEntry {
            frame: frame.to_string(),
            description: format!("An agent performs the activity {frame}"),
            gloss: format!("Open-vocabulary activity '{verb}'"),
            example_actions: vec![verb],
        }
    }

    /// The `FRAME; description; gloss; a, b, c` record used in compact output.
    pub fn compact_record(&self) -> String {
        format!(
            "{}; {}; {}; {}",
            self.frame,
            self.description,
            self.gloss,
            self.example_actions.join(", ")
        )
    }
}

pub fn is_valid_frame_name(frame: &str) -> bool {
    !frame.is_empty()
        && frame
            .bytes()
            .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_')
        && frame.as_bytes()[0].is_ascii_uppercase()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SocialSceneGraph {
    nodes: BTreeMap<NodeId, Node>,
    spatial_edges: Vec<SpatialEdge>,
    activity_edges: BTreeMap<EdgeKey, ActivityEdge>,
    glossary: BTreeMap<String, FrameGlossaryEntry>,
}

impl SocialSceneGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: Node) -> Result<NodeId, GraphError> {
        let id = node.id();
        if self.nodes.contains_key(&id) {
            return Err(GraphError::DuplicateId(id));
        }
        node.validate()?;
        if let Node::Human(h) = &node {
            if self.humans().any(|o| o.marker_label == h.marker_label) {
                return Err(GraphError::InvalidNode {
                    id,
                    reason: format!("marker label {} already in use", h.marker_label),
                });
            }
        }
        self.nodes.insert(id, node);
        Ok(id)
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn human(&self, id: NodeId) -> Option<&HumanNode> {
        self.nodes.get(&id).and_then(Node::as_human)
    }

    pub fn human_mut(&mut self, id: NodeId) -> Option<&mut HumanNode> {
        match self.nodes.get_mut(&id) {
            Some(Node::Human(h)) => Some(h),
            _ => None,
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn objects(&self) -> impl Iterator<Item = &EntityNode> {
        self.nodes.values().filter_map(|n| match n {
            Node::Object(o) => Some(o),
            Node::Human(_) => None,
        })
    }

    pub fn humans(&self) -> impl Iterator<Item = &HumanNode> {
        self.nodes.values().filter_map(Node::as_human)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Smallest id strictly greater than every id in use.
    pub fn next_id(&self) -> NodeId {
        self.nodes
            .keys()
            .next_back()
            .map_or(NodeId(0), |id| NodeId(id.0 + 1))
    }

    pub fn next_marker_label(&self) -> u32 {
        self.humans().map(|h| h.marker_label).max().unwrap_or(0) + 1
    }

    pub fn spatial_edges(&self) -> &[SpatialEdge] {
        &self.spatial_edges
    }

    pub fn add_spatial_edge(&mut self, edge: SpatialEdge) -> Result<(), GraphError> {
        if edge.from_id == edge.to_id {
            return Err(GraphError::Invariant(format!(
                "spatial self-loop on node {}",
                edge.from_id
            )));
        }
        for id in [edge.from_id, edge.to_id] {
            if !self.nodes.contains_key(&id) {
                return Err(GraphError::UnknownId(id));
            }
        }
        self.spatial_edges.push(edge);
        Ok(())
    }

    pub fn activity_edges(&self) -> impl Iterator<Item = &ActivityEdge> {
        self.activity_edges.values()
    }

    pub fn activity_edge_count(&self) -> usize {
        self.activity_edges.len()
    }

    pub fn activity_edge(&self, from: NodeId, to: NodeId, frame: &str) -> Option<&ActivityEdge> {
        self.activity_edges.get(&EdgeKey {
            from_id: from,
            to_id: to,
            frame: frame.to_string(),
        })
    }

    pub fn glossary(&self) -> &BTreeMap<String, FrameGlossaryEntry> {
        &self.glossary
    }

    pub fn set_glossary_entry(&mut self, entry: FrameGlossaryEntry) {
        self.glossary.insert(entry.frame.clone(), entry);
    }

    /// Records one observation of `raw_label` under `frame` on the edge
    /// `from -> to`, creating the edge on first sight.
    pub fn upsert_activity_edge(
        &mut self,
        from: NodeId,
        to: NodeId,
        raw_label: &str,
        frame: &str,
    ) -> Result<&ActivityEdge, GraphError> {
        self.upsert_activity_edge_from(from, to, raw_label, frame, None)
    }

    /// Same as [`Self::upsert_activity_edge`], tagging the observation with
    /// the frame it came from so it can later be retracted.
    pub fn upsert_activity_edge_from(
        &mut self,
        from: NodeId,
        to: NodeId,
        raw_label: &str,
        frame: &str,
        source_frame_id: Option<&str>,
    ) -> Result<&ActivityEdge, GraphError> {
        match self.nodes.get(&from) {
            None => return Err(GraphError::UnknownId(from)),
            Some(n) if !n.is_human() => return Err(GraphError::NonHumanSource(from)),
            Some(_) => {}
        }
        if !self.nodes.contains_key(&to) {
            return Err(GraphError::UnknownId(to));
        }
        if !is_valid_frame_name(frame) {
            return Err(GraphError::InvalidFrame(frame.to_string()));
        }
        if !self.glossary.contains_key(frame) {
            self.glossary
                .insert(frame.to_string(), FrameGlossaryEntry::minimal(frame));
        }
        let key = EdgeKey {
            from_id: from,
            to_id: to,
            frame: frame.to_string(),
        };
        let edge = self
            .activity_edges
            .entry(key)
            .or_insert_with(|| ActivityEdge {
                from_id: from,
                to_id: to,
                frame: frame.to_string(),
                raw_labels: Vec::new(),
                detection_count: 0,
            });
        edge.raw_labels.push(RawLabel {
            label: raw_label.to_string(),
            source_frame_id: source_frame_id.map(str::to_string),
        });
        edge.detection_count += 1;
        Ok(edge)
    }

    /// Removes every raw label observed in `frame_id`, dropping edges left
    /// with no observations. Returns the number of labels removed.
    pub fn retract_frame(&mut self, frame_id: &str) -> usize {
        let mut removed = 0;
        for edge in self.activity_edges.values_mut() {
            let before = edge.raw_labels.len();
            edge.raw_labels
                .retain(|l| l.source_frame_id.as_deref() != Some(frame_id));
            let gone = before - edge.raw_labels.len();
            edge.detection_count -= gone as u32;
            removed += gone;
        }
        self.activity_edges.retain(|_, e| e.detection_count > 0);
        self.drop_unused_glossary();
        removed
    }

    fn drop_unused_glossary(&mut self) {
        let used: BTreeSet<&str> = self
            .activity_edges
            .values()
            .map(|e| e.frame.as_str())
            .collect();
        self.glossary.retain(|f, _| used.contains(f.as_str()));
    }

    /// Replaces all activity edges; used by consolidation.
    pub(crate) fn replace_activity_edges(&mut self, edges: Vec<ActivityEdge>) {
        self.activity_edges = edges.into_iter().map(|e| (e.key(), e)).collect();
    }

    pub(crate) fn retain_glossary(&mut self, keep: impl Fn(&str) -> bool) {
        self.glossary.retain(|f, _| keep(f));
    }

    /// Checks every graph-level invariant.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut markers = BTreeSet::new();
        for (id, node) in &self.nodes {
            if *id != node.id() {
                return Err(GraphError::Invariant(format!(
                    "node keyed {id} carries id {}",
                    node.id()
                )));
            }
            node.validate()?;
            if let Node::Human(h) = node {
                if !markers.insert(h.marker_label) {
                    return Err(GraphError::Invariant(format!(
                        "marker label {} used twice",
                        h.marker_label
                    )));
                }
            }
        }
        for e in &self.spatial_edges {
            if e.from_id == e.to_id {
                return Err(GraphError::Invariant(format!(
                    "spatial self-loop on node {}",
                    e.from_id
                )));
            }
            for id in [e.from_id, e.to_id] {
                if !self.nodes.contains_key(&id) {
                    return Err(GraphError::UnknownId(id));
                }
            }
        }
        for e in self.activity_edges.values() {
            match self.nodes.get(&e.from_id) {
                None => return Err(GraphError::UnknownId(e.from_id)),
                Some(n) if !n.is_human() => return Err(GraphError::NonHumanSource(e.from_id)),
                Some(_) => {}
            }
            if !self.nodes.contains_key(&e.to_id) {
                return Err(GraphError::UnknownId(e.to_id));
            }
            if !is_valid_frame_name(&e.frame) {
                return Err(GraphError::InvalidFrame(e.frame.clone()));
            }
            if e.detection_count as usize != e.raw_labels.len() {
                return Err(GraphError::Invariant(format!(
                    "edge {}->{} {}: detection_count {} != {} raw labels",
                    e.from_id,
                    e.to_id,
                    e.frame,
                    e.detection_count,
                    e.raw_labels.len()
                )));
            }
            if !self.glossary.contains_key(&e.frame) {
                return Err(GraphError::Invariant(format!(
                    "frame {} has no glossary entry",
                    e.frame
                )));
            }
        }
        for (frame, entry) in &self.glossary {
            if *frame != entry.frame {
                return Err(GraphError::Invariant(format!(
                    "glossary key {frame} holds entry for {}",
                    entry.frame
                )));
            }
        }
        Ok(())
    }

    /// A copy containing only `keep` nodes and the edges among them.
    pub fn subgraph(&self, keep: &BTreeSet<NodeId>) -> SocialSceneGraph {
        let nodes: BTreeMap<_, _> = self
            .nodes
            .iter()
            .filter(|(id, _)| keep.contains(id))
            .map(|(id, n)| (*id, n.clone()))
            .collect();
        let spatial_edges = self
            .spatial_edges
            .iter()
            .filter(|e| keep.contains(&e.from_id) && keep.contains(&e.to_id))
            .cloned()
            .collect();
        let activity_edges: BTreeMap<_, _> = self
            .activity_edges
            .iter()
            .filter(|(k, _)| keep.contains(&k.from_id) && keep.contains(&k.to_id))
            .map(|(k, e)| (k.clone(), e.clone()))
            .collect();
        let used: BTreeSet<&str> = activity_edges.values().map(|e| e.frame.as_str()).collect();
        let glossary = self
            .glossary
            .iter()
            .filter(|(f, _)| used.contains(f.as_str()))
            .map(|(f, e)| (f.clone(), e.clone()))
            .collect();
        SocialSceneGraph {
            nodes,
            spatial_edges,
            activity_edges,
            glossary,
        }
    }

    /// Full-fidelity JSON (pretty-printed).
    pub fn to_full_json(&self) -> String {
        let file = GraphFile {
            meta: GraphMeta {
                schema: GRAPH_SCHEMA.to_string(),
            },
            nodes: self.nodes.values().cloned().collect(),
            spatial_edges: self.spatial_edges.clone(),
            activity_edges: self.activity_edges.values().cloned().collect(),
            glossary: self.glossary.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("graph serialization is infallible")
    }

    /// Parses and validates a full-fidelity graph file.
    pub fn from_full_json(text: &str) -> Result<SocialSceneGraph, GraphError> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| GraphError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.meta.schema != GRAPH_SCHEMA {
            return Err(GraphError::Invariant(format!(
                "unsupported schema {:?}, expected {GRAPH_SCHEMA:?}",
                file.meta.schema
            )));
        }
        let mut nodes = BTreeMap::new();
        for node in file.nodes {
            let id = node.id();
            if nodes.insert(id, node).is_some() {
                return Err(GraphError::DuplicateId(id));
            }
        }
        let mut activity_edges = BTreeMap::new();
        for edge in file.activity_edges {
            let key = edge.key();
            if activity_edges.insert(key, edge).is_some() {
                return Err(GraphError::Invariant(
                    "duplicate (from, to, frame) activity edge".to_string(),
                ));
            }
        }
        let graph = SocialSceneGraph {
            nodes,
            spatial_edges: file.spatial_edges,
            activity_edges,
            glossary: file
                .glossary
                .into_iter()
                .map(|g| (g.frame.clone(), g))
                .collect(),
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Compact JSON for LLM reasoning: `[id, class, [x, y, z]]` nodes,
    /// `[from, to, FRAME]` edges and one glossary record per frame in use.
    pub fn to_compact_json(&self, decimals: u32) -> String {
        let scale = 10f64.powi(decimals as i32);
        let round = |v: f64| {
            let r = (v * scale).round() / scale;
            if r == 0.0 {
                0.0
            } else {
                r
            }
        };
        let nodes: Vec<(u32, &str, [f64; 3])> = self
            .nodes
            .values()
            .map(|n| {
                let c = n.center();
                (
                    n.id().0,
                    n.class_label(),
                    [round(c.x), round(c.y), round(c.z)],
                )
            })
            .collect();
        let edges: Vec<(u32, u32, &str)> = self
            .activity_edges
            .keys()
            .map(|k| (k.from_id.0, k.to_id.0, k.frame.as_str()))
            .collect();
        let frames: BTreeSet<&str> = edges.iter().map(|e| e.2).collect();
        let glossary: Vec<String> = frames
            .into_iter()
            .map(|f| match self.glossary.get(f) {
                Some(entry) => entry.compact_record(),
                None => FrameGlossaryEntry::minimal(f).compact_record(),
            })
            .collect();
        let compact = CompactGraph {
            nodes,
            edges,
            glossary,
        };
        serde_json::to_string(&compact).expect("compact serialization is infallible")
    }
}

#[derive(Serialize)]
struct CompactGraph<'a> {
    nodes: Vec<(u32, &'a str, [f64; 3])>,
    edges: Vec<(u32, u32, &'a str)>,
    glossary: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GraphMeta {
    schema: String,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<Node>,
    #[serde(default)]
    spatial_edges: Vec<SpatialEdge>,
    #[serde(default)]
    activity_edges: Vec<ActivityEdge>,
    #[serde(default)]
    glossary: Vec<FrameGlossaryEntry>,
    meta: GraphMeta,
}
