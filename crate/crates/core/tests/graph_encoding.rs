//! Full-fidelity round trips on random graphs and a pinned compact encoding.

use std::collections::BTreeSet;

use proptest::prelude::*;
use s3dsg_core::{
    BehaviorDescription, EntityNode, FrameGlossaryEntry, HeadPose, HumanNode, Node, NodeId,
    SocialSceneGraph, SpatialEdge, Vec3,
};

const FRAMES: [&str; 5] = ["SEE", "SIT", "SPEAK", "USE", "WAVE_AT"];
const CLASSES: [&str; 4] = ["chair", "table", "tv", "mug \"blue\""];

fn point() -> impl Strategy<Value = Vec3> {
    (-10.0..10.0f64, -10.0..10.0f64, 0.0..3.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

type HumanSpec = (Vec<Vec3>, bool, Option<(String, String)>);

#[derive(Debug, Clone)]
struct Spec {
    objects: Vec<(usize, Vec<Vec3>, Option<String>)>,
    humans: Vec<HumanSpec>,
    spatial: Vec<(usize, usize, String)>,
    activity: Vec<(usize, usize, usize, String, Option<u8>)>,
    glossed: Vec<usize>,
}

fn spec() -> impl Strategy<Value = Spec> {
    let objects = proptest::collection::vec(
        (
            0..CLASSES.len(),
            proptest::collection::vec(point(), 1..6),
            proptest::option::of("[a-z ]{0,12}"),
        ),
        0..6,
    );
    let humans = proptest::collection::vec(
        (
            proptest::collection::vec(point(), 1..6),
            any::<bool>(),
            proptest::option::of(("[a-z]{1,8}", "[a-z ]{0,8}")),
        ),
        0..4,
    );
    let spatial = proptest::collection::vec((0..20usize, 0..20usize, "[a-z_]{1,8}"), 0..5);
    let activity = proptest::collection::vec(
        (
            0..20usize,
            0..20usize,
            0..FRAMES.len(),
            "[a-z ]{1,10}",
            proptest::option::of(0u8..4),
        ),
        0..10,
    );
    let glossed = proptest::collection::vec(0..FRAMES.len(), 0..3);
    (objects, humans, spatial, activity, glossed).prop_map(
        |(objects, humans, spatial, activity, glossed)| Spec {
            objects,
            humans,
            spatial,
            activity,
            glossed,
        },
    )
}

fn build(spec: &Spec) -> SocialSceneGraph {
    let mut g = SocialSceneGraph::new();
    for (class, pts, caption) in &spec.objects {
        let mut n = EntityNode::from_points(g.next_id(), CLASSES[*class], pts.clone());
        n.caption = caption.clone();
        g.add_node(Node::Object(n)).unwrap();
    }
    let mut human_ids = Vec::new();
    for (pts, posed, behavior) in &spec.humans {
        let mut h = HumanNode::from_points(g.next_id(), g.next_marker_label(), pts.clone());
        if *posed {
            let head = h.center;
            h.head_pose = Some(HeadPose::looking_at(
                head,
                Vec3::new(head.x + 1.0, head.y + 0.5, head.z),
                Vec3::new(0.0, 0.0, 1.0),
                "f0",
            ));
        }
        if let Some((posture, gaze)) = behavior {
            h.behavior = Some(BehaviorDescription {
                posture: posture.clone(),
                gaze: gaze.clone(),
                physical_state: String::new(),
                attributes: vec![gaze.clone()],
            });
        }
        human_ids.push(g.add_node(Node::Human(h)).unwrap());
    }
    let ids: Vec<NodeId> = g.nodes().map(|n| n.id()).collect();
    if ids.len() >= 2 {
        for (a, b, rel) in &spec.spatial {
            let (a, b) = (ids[a % ids.len()], ids[b % ids.len()]);
            if a != b {
                g.add_spatial_edge(SpatialEdge {
                    from_id: a,
                    to_id: b,
                    relation_label: rel.clone(),
                })
                .unwrap();
            }
        }
    }
    if !human_ids.is_empty() {
        for (h, t, f, raw, source) in &spec.activity {
            let from = human_ids[h % human_ids.len()];
            let to = ids[t % ids.len()];
            let source = source.map(|s| format!("f{s}"));
            g.upsert_activity_edge_from(from, to, raw, FRAMES[*f], source.as_deref())
                .unwrap();
        }
    }
    for &f in &spec.glossed {
        g.set_glossary_entry(FrameGlossaryEntry {
            frame: FRAMES[f].to_string(),
            description: "someone does it".to_string(),
            gloss: "an activity; with punctuation".to_string(),
            example_actions: vec!["a".to_string(), "b".to_string()],
        });
    }
    g
}

#[test]
fn full_encoding_round_trips_on_random_graphs() {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases: 500,
        ..ProptestConfig::default()
    });
    runner
        .run(&spec(), |s| {
            let g = build(&s);
            g.validate().unwrap();
            let text = g.to_full_json();
            let back = SocialSceneGraph::from_full_json(&text).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(back.to_full_json(), text);
            Ok(())
        })
        .unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn compact_encoding_is_a_projection(s in spec()) {
        let g = build(&s);
        let text = g.to_compact_json(2);
        prop_assert_eq!(&text, &g.clone().to_compact_json(2));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let nodes = v["nodes"].as_array().unwrap();
        prop_assert_eq!(nodes.len(), g.node_count());
        for (row, node) in nodes.iter().zip(g.nodes()) {
            prop_assert_eq!(row[0].as_u64().unwrap(), u64::from(node.id().0));
            prop_assert_eq!(row[1].as_str().unwrap(), node.class_label());
            let c = node.center();
            for (k, want) in [c.x, c.y, c.z].into_iter().enumerate() {
                prop_assert!((row[2][k].as_f64().unwrap() - want).abs() <= 0.005 + 1e-12);
            }
        }
        let edges = v["edges"].as_array().unwrap();
        prop_assert_eq!(edges.len(), g.activity_edge_count());
        let frames: BTreeSet<&str> = g.activity_edges().map(|e| e.frame.as_str()).collect();
        let glossary = v["glossary"].as_array().unwrap();
        prop_assert_eq!(glossary.len(), frames.len());
        for (record, frame) in glossary.iter().zip(&frames) {
            let prefix = format!("{frame}; ");
            prop_assert!(record.as_str().unwrap().starts_with(&prefix));
        }
    }

    #[test]
    fn subgraph_of_everything_keeps_all_content(s in spec()) {
        let g = build(&s);
        let all: BTreeSet<NodeId> = g.nodes().map(|n| n.id()).collect();
        let sub = g.subgraph(&all);
        prop_assert_eq!(sub.to_compact_json(6), g.to_compact_json(6));
        prop_assert_eq!(sub.spatial_edges(), g.spatial_edges());
        prop_assert!(sub.activity_edges().eq(g.activity_edges()));
        // Glossary entries survive only for frames still in use.
        let used: BTreeSet<&String> = g.activity_edges().map(|e| &e.frame).collect();
        prop_assert!(sub.glossary().keys().all(|f| used.contains(f)));
        let none = g.subgraph(&BTreeSet::new());
        prop_assert_eq!(none.node_count(), 0);
        prop_assert_eq!(none.activity_edge_count(), 0);
    }
}

fn pinned_graph() -> SocialSceneGraph {
    let mut g = SocialSceneGraph::new();
    let sofa = EntityNode::from_points(
        NodeId(1),
        "sofa",
        vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 0.9, 0.8)],
    );
    let tv = EntityNode::from_points(NodeId(2), "tv", vec![Vec3::new(3.0, -1.25, 1.0)]);
    g.add_node(Node::Object(sofa)).unwrap();
    g.add_node(Node::Object(tv)).unwrap();
    for (id, marker, x) in [(3, 1, 0.5), (4, 2, 1.5)] {
        let pts = vec![Vec3::new(x, 0.4, 0.0), Vec3::new(x + 0.362, 0.6, 1.7)];
        g.add_node(Node::Human(HumanNode::from_points(NodeId(id), marker, pts)))
            .unwrap();
    }
    g.upsert_activity_edge(NodeId(3), NodeId(2), "watching", "SEE")
        .unwrap();
    g.upsert_activity_edge(NodeId(3), NodeId(1), "sitting", "SIT")
        .unwrap();
    g.upsert_activity_edge(NodeId(4), NodeId(3), "chatting", "SPEAK")
        .unwrap();
    g.set_glossary_entry(FrameGlossaryEntry {
        frame: "SEE".to_string(),
        description: "A perceiver attends visually to a phenomenon".to_string(),
        gloss: "look at or watch something".to_string(),
        example_actions: vec!["watch".to_string(), "look".to_string()],
    });
    g
}

#[test]
fn compact_encoding_matches_golden_bytes() {
    let golden = include_str!("golden/compact_graph.json");
    assert_eq!(pinned_graph().to_compact_json(2), golden.trim_end());
}
