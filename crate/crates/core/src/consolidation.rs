//! Activity consolidation: frame canonicalization of raw labels followed by
//! frequency-based pruning of activity edges.
//!
//! An edge `e` survives pruning iff `N(e) >= max(tau * M, n_min)`, where
//! `N(e)` is its detection count and `M` the largest count among the edges
//! of the same group (by default, the edges leaving the same human).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ActivityEdge, EdgeKey, NodeId, SocialSceneGraph};
use crate::lexicon::FrameLexicon;

/// Slack absorbing float rounding in `tau * M` (e.g. `0.7 * 10`).
const THRESHOLD_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("tau must lie in (0, 1], got {0}")]
    Tau(f64),
    #[error("n_min must be at least 1")]
    NMin,
}

/// Which edges share the maximum count `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    PerSource,
    PerTarget,
    PerPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruningConfig {
    pub tau: f64,
    pub n_min: u32,
    #[serde(default)]
    pub grouping: Grouping,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            tau: 0.4,
            n_min: 2,
            grouping: Grouping::PerSource,
        }
    }
}

impl PruningConfig {
    pub fn new(tau: f64, n_min: u32) -> Result<Self, ConfigError> {
        let cfg = Self {
            tau,
            n_min,
            grouping: Grouping::PerSource,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ConfigError::Tau(self.tau));
        }
        if self.n_min < 1 {
            return Err(ConfigError::NMin);
        }
        Ok(())
    }

    /// `max(tau * M, n_min)`.
    pub fn threshold(&self, max_count: u32) -> f64 {
        (self.tau * f64::from(max_count)).max(f64::from(self.n_min))
    }

    pub fn keeps(&self, count: u32, max_count: u32) -> bool {
        f64::from(count) + THRESHOLD_EPS >= self.threshold(max_count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedEdge {
    pub from_id: NodeId,
    pub to_id: NodeId,
    pub frame: String,
    pub detection_count: u32,
    pub group_max: u32,
    pub threshold: f64,
}

fn group_key(edge: &ActivityEdge, grouping: Grouping) -> (NodeId, Option<NodeId>) {
    match grouping {
        Grouping::PerSource => (edge.from_id, None),
        Grouping::PerTarget => (edge.to_id, None),
        Grouping::PerPair => {
            let (a, b) = if edge.from_id <= edge.to_id {
                (edge.from_id, edge.to_id)
            } else {
                (edge.to_id, edge.from_id)
            };
            (a, Some(b))
        }
    }
}

/// Splits edges into kept and pruned according to the threshold rule.
pub fn partition_edges(
    edges: &[ActivityEdge],
    config: &PruningConfig,
) -> (Vec<ActivityEdge>, Vec<PrunedEdge>) {
    let mut group_max: BTreeMap<(NodeId, Option<NodeId>), u32> = BTreeMap::new();
    for e in edges {
        let m = group_max.entry(group_key(e, config.grouping)).or_insert(0);
        *m = (*m).max(e.detection_count);
    }
    let mut kept = Vec::new();
    let mut pruned = Vec::new();
    for e in edges {
        let m = group_max[&group_key(e, config.grouping)];
        if config.keeps(e.detection_count, m) {
            kept.push(e.clone());
        } else {
            pruned.push(PrunedEdge {
                from_id: e.from_id,
                to_id: e.to_id,
                frame: e.frame.clone(),
                detection_count: e.detection_count,
                group_max: m,
                threshold: config.threshold(m),
            });
        }
    }
    (kept, pruned)
}

/// Removes low-support activity edges. Spatial edges are untouched.
pub fn prune(
    graph: &SocialSceneGraph,
    config: &PruningConfig,
) -> (SocialSceneGraph, Vec<PrunedEdge>) {
    let edges: Vec<ActivityEdge> = graph.activity_edges().cloned().collect();
    let (kept, pruned) = partition_edges(&edges, config);
    let mut out = graph.clone();
    out.replace_activity_edges(kept);
    (out, pruned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationLog {
    pub merged_edges: usize,
    pub pruned: Vec<PrunedEdge>,
}

/// Re-canonicalizes every raw label, merges edges that collapse onto the
/// same `(from, to, frame)` triple, prunes, and refreshes the glossary.
///
/// A raw label whose head verb is in the lexicon moves to that verb's frame;
/// any other label stays with its edge's frame (itself resolved through the
/// lexicon, so `TALK` becomes `SPEAK`).
pub fn consolidate(
    graph: &SocialSceneGraph,
    lexicon: &mut FrameLexicon,
    config: &PruningConfig,
) -> (SocialSceneGraph, ConsolidationLog) {
    let before = graph.activity_edge_count();
    let mut merged: BTreeMap<EdgeKey, ActivityEdge> = BTreeMap::new();
    for edge in graph.activity_edges() {
        let edge_frame = lexicon.canonical_frame_name(&edge.frame);
        for raw in &edge.raw_labels {
            let frame = lexicon
                .lookup(&raw.label)
                .map_or_else(|| edge_frame.clone(), str::to_string);
            let key = EdgeKey {
                from_id: edge.from_id,
                to_id: edge.to_id,
                frame: frame.clone(),
            };
            let target = merged.entry(key).or_insert_with(|| ActivityEdge {
                from_id: edge.from_id,
                to_id: edge.to_id,
                frame,
                raw_labels: Vec::new(),
                detection_count: 0,
            });
            target.raw_labels.push(raw.clone());
            target.detection_count += 1;
        }
    }
    let edges: Vec<ActivityEdge> = merged.into_values().collect();
    let merged_edges = before.saturating_sub(edges.len());
    let (kept, pruned) = partition_edges(&edges, config);

    let mut out = graph.clone();
    out.replace_activity_edges(kept);
    let frames: Vec<String> = out.activity_edges().map(|e| e.frame.clone()).collect();
    out.retain_glossary(|f| frames.iter().any(|k| k == f));
    for frame in &frames {
        lexicon.ensure_frame(frame);
        out.set_glossary_entry(lexicon.glossary_entry(frame));
    }
    (
        out,
        ConsolidationLog {
            merged_edges,
            pruned,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::graph::{EntityNode, HumanNode, Node};

    fn graph_with_counts(counts: &[u32]) -> SocialSceneGraph {
        let mut g = SocialSceneGraph::new();
        g.add_node(Node::Human(HumanNode::from_points(
            NodeId(0),
            1,
            vec![Vec3::ZERO],
        )))
        .unwrap();
        for (i, &c) in counts.iter().enumerate() {
            let id = NodeId(i as u32 + 1);
            g.add_node(Node::Object(EntityNode::from_points(
                id,
                "thing",
                vec![Vec3::new(i as f64 + 1.0, 0.0, 0.0)],
            )))
            .unwrap();
            for _ in 0..c {
                g.upsert_activity_edge(NodeId(0), id, "using", "USE")
                    .unwrap();
            }
        }
        g
    }

    fn kept_counts(g: &SocialSceneGraph) -> Vec<u32> {
        let mut v: Vec<u32> = g.activity_edges().map(|e| e.detection_count).collect();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v
    }

    #[test]
    fn prune_relative_threshold_binds() {
        let g = graph_with_counts(&[10, 4, 3, 1]);
        let (out, log) = prune(&g, &PruningConfig::default());
        assert_eq!(kept_counts(&out), [10, 4]);
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|p| p.threshold == 4.0 && p.group_max == 10));
    }

    #[test]
    fn prune_lone_weak_edge() {
        let g = graph_with_counts(&[1]);
        let (out, log) = prune(&g, &PruningConfig::default());
        assert_eq!(out.activity_edge_count(), 0);
        assert_eq!(log[0].threshold, 2.0);
    }

    #[test]
    fn prune_boundary_is_kept() {
        let g = graph_with_counts(&[5, 2]);
        let (out, _) = prune(&g, &PruningConfig::default());
        assert_eq!(kept_counts(&out), [5, 2]);
    }

    #[test]
    fn float_rounding_in_threshold_does_not_prune_boundary() {
        // 0.7 * 10 evaluates to 7.000000000000001 in binary floating point.
        let cfg = PruningConfig::new(0.7, 1).unwrap();
        assert!(cfg.keeps(7, 10));
        assert!(!cfg.keeps(6, 10));
    }

    #[test]
    fn config_validation() {
        assert_eq!(PruningConfig::new(0.0, 2), Err(ConfigError::Tau(0.0)));
        assert_eq!(PruningConfig::new(1.5, 2), Err(ConfigError::Tau(1.5)));
        assert_eq!(PruningConfig::new(0.4, 0), Err(ConfigError::NMin));
        assert!(PruningConfig::new(1.0, 1).is_ok());
    }

    #[test]
    fn consolidate_merges_synonym_frames() {
        let mut g = SocialSceneGraph::new();
        for (id, marker) in [(1, 1), (2, 2)] {
            g.add_node(Node::Human(HumanNode::from_points(
                NodeId(id),
                marker,
                vec![Vec3::new(id as f64, 0.0, 0.0)],
            )))
            .unwrap();
        }
        g.upsert_activity_edge(NodeId(1), NodeId(2), "chatting with", "SPEAK")
            .unwrap();
        g.upsert_activity_edge(NodeId(1), NodeId(2), "speaking to", "SPEAK")
            .unwrap();
        g.upsert_activity_edge(NodeId(1), NodeId(2), "talk", "TALK")
            .unwrap();
        let mut lex = FrameLexicon::base();
        let (out, log) = consolidate(&g, &mut lex, &PruningConfig::default());
        let edges: Vec<_> = out.activity_edges().collect();
        assert_eq!(edges.len(), 1);
        assert_eq!(edges[0].frame, "SPEAK");
        assert_eq!(edges[0].detection_count, 3);
        assert_eq!(log.merged_edges, 1);
        assert_eq!(out.glossary().keys().collect::<Vec<_>>(), ["SPEAK"]);
        assert_eq!(out.glossary()["SPEAK"], *lex.entry("SPEAK").unwrap());
        out.validate().unwrap();
    }

    #[test]
    fn consolidate_without_activity_edges_is_identity() {
        let g = graph_with_counts(&[]);
        let (out, log) = consolidate(&g, &mut FrameLexicon::base(), &PruningConfig::default());
        assert_eq!(out, g);
        assert!(log.pruned.is_empty());
    }

    #[test]
    fn consolidate_keeps_equal_counts() {
        let g = graph_with_counts(&[3, 3]);
        let (out, _) = consolidate(&g, &mut FrameLexicon::base(), &PruningConfig::default());
        assert_eq!(kept_counts(&out), [3, 3]);
    }

    #[test]
    fn unknown_labels_stay_on_their_edge_frame() {
        let mut g = graph_with_counts(&[]);
        g.add_node(Node::Object(EntityNode::from_points(
            NodeId(9),
            "ball",
            vec![Vec3::ZERO],
        )))
        .unwrap();
        for _ in 0..2 {
            g.upsert_activity_edge(NodeId(0), NodeId(9), "zorbing", "ZORB")
                .unwrap();
        }
        let mut lex = FrameLexicon::base();
        let (out, _) = consolidate(&g, &mut lex, &PruningConfig::default());
        assert_eq!(out.activity_edges().next().unwrap().frame, "ZORB");
        assert!(lex.entry("ZORB").is_some());
        out.validate().unwrap();
    }
}
