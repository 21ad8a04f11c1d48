//! Regenerates the two-scene fixture benchmark and its scripted backend.
//!
//! ```text
//! cargo run -p s3dsg-core --example make_fixture -- crates/core/fixtures/benchmark
//! ```
//!
//! Scenes are rendered from box primitives. Inference answers come from an
//! oracle that reads the prompts and consults the ground truth, with a few
//! deliberate mistakes, and are recorded into `scenario.json`. The
//! predictions are produced the same way the CLI produces them, so replaying
//! `scenario.json` through `s3dsg augment`/`consolidate`/`query` hits every
//! recorded fingerprint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde_json::{json, Value};

use s3dsg_core::benchmark::{
    answer_queries_llm, evaluate_relationships, load_benchmark, load_scene, score_queries,
    BenchmarkQuery, EvalConfig, GroundTruthRelationship, QueryCategory, QueryScores,
};
use s3dsg_core::consolidation::{consolidate, PruningConfig};
use s3dsg_core::inference::{
    InferenceBackend, InferenceError, InferenceRequest, RecordingBackend, ScenarioRecord, Stage,
};
use s3dsg_core::pipeline::{augment, DetectionKind, FrameManifest, FrameRecord, PipelineConfig};
use s3dsg_core::synthetic::{
    detect, look_at_camera, render, Primitive, SceneInstance, SyntheticScene,
};
use s3dsg_core::visibility::{rigid_to_row_major, CameraIntrinsics};
use s3dsg_core::{FrameLexicon, SocialSceneGraph, Vec3};

const SPACING: f64 = 0.04;
const MIN_PIXELS: usize = 30;

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 120.0,
        fy: 120.0,
        cx: 80.0,
        cy: 60.0,
        width: 160,
        height: 120,
    }
}

fn v(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3::new(x, y, z)
}

fn object(id: u32, class: &str, min: Vec3, max: Vec3) -> SceneInstance {
    SceneInstance {
        id,
        class_label: class.into(),
        kind: DetectionKind::Object,
        primitive: Primitive::Box { min, max },
        gaze_target: None,
    }
}

fn human(id: u32, min: Vec3, max: Vec3, gaze: Vec3) -> SceneInstance {
    SceneInstance {
        id,
        class_label: "person".into(),
        kind: DetectionKind::Human,
        primitive: Primitive::Box { min, max },
        gaze_target: Some(gaze),
    }
}

struct SceneSpec {
    name: &'static str,
    prefix: &'static str,
    scene: SyntheticScene,
    cameras: Vec<(Vec3, Vec3)>,
    relationships: Vec<(u32, u32, &'static str)>,
    /// Relationships the oracle claims although they are not in the ground truth.
    false_claims: Vec<(u32, u32, &'static str)>,
    /// Ground-truth relationships the oracle never mentions.
    missed: Vec<(u32, u32, &'static str)>,
    /// Claims made only for the first frame; too rare to survive pruning.
    one_off: Vec<(u32, u32, &'static str)>,
    queries: Vec<(&'static str, QueryCategory, &'static str, Vec<u32>)>,
    /// Query id to the ground-truth humans the oracle answers with.
    answers: BTreeMap<&'static str, Vec<u32>>,
}

fn living_room() -> SceneSpec {
    let scene = SyntheticScene {
        instances: vec![
            object(1, "sofa", v(0.5, 3.6, 0.0), v(2.5, 4.4, 0.8)),
            object(2, "tv", v(1.2, 0.2, 0.5), v(2.2, 0.4, 1.1)),
            object(3, "table", v(4.0, 0.5, 0.0), v(5.0, 1.3, 0.7)),
            object(4, "book", v(4.3, 0.8, 0.7), v(4.6, 1.0, 0.76)),
            object(5, "chair", v(4.2, 1.8, 0.0), v(4.8, 2.4, 0.9)),
            human(
                10,
                v(1.325, 3.825, 0.025),
                v(1.775, 4.175, 1.325),
                v(1.7, 0.3, 0.8),
            ),
            human(
                11,
                v(2.925, 3.025, 0.025),
                v(3.375, 3.375, 1.725),
                v(1.55, 4.0, 1.2),
            ),
            human(
                12,
                v(4.275, 1.925, 0.025),
                v(4.725, 2.275, 1.325),
                v(4.45, 0.9, 0.73),
            ),
        ],
    };
    let target = v(2.75, 2.3, 0.6);
    SceneSpec {
        name: "scene_1",
        prefix: "s1",
        scene,
        cameras: vec![
            (v(2.75, -2.2, 2.6), target),
            (v(7.4, 2.2, 2.6), target),
            (v(-1.9, 2.2, 2.6), target),
            (v(2.75, 7.2, 2.8), v(2.75, 2.0, 0.6)),
        ],
        relationships: vec![
            (10, 2, "SEE"),
            (10, 1, "SIT"),
            (11, 10, "SPEAK"),
            (10, 11, "LISTEN"),
            (12, 4, "READ"),
            (12, 5, "SIT"),
        ],
        false_claims: vec![],
        missed: vec![],
        one_off: vec![(11, 1, "SEE")],
        queries: vec![
            (
                "s1_q1",
                QueryCategory::Spatial,
                "Who is closest to the table?",
                vec![12],
            ),
            (
                "s1_q2",
                QueryCategory::Activity,
                "Who is having a conversation?",
                vec![11, 10],
            ),
            (
                "s1_q3",
                QueryCategory::Functional,
                "Who might want the TV remote?",
                vec![10],
            ),
            (
                "s1_q4",
                QueryCategory::Activity,
                "Who is reading?",
                vec![12],
            ),
        ],
        answers: BTreeMap::from([
            ("s1_q1", vec![12]),
            ("s1_q2", vec![11]),
            ("s1_q3", vec![10]),
            ("s1_q4", vec![12]),
        ]),
    }
}

fn kitchen() -> SceneSpec {
    let scene = SyntheticScene {
        instances: vec![
            object(1, "stove", v(0.2, 0.2, 0.0), v(1.0, 0.8, 0.9)),
            object(2, "fridge", v(0.1, 3.6, 0.0), v(0.8, 4.3, 1.9)),
            object(3, "table", v(3.5, 2.0, 0.0), v(5.0, 3.0, 0.75)),
            object(4, "laptop", v(4.0, 2.3, 0.75), v(4.4, 2.6, 0.78)),
            object(5, "chair", v(3.8, 3.3, 0.0), v(4.4, 3.9, 0.9)),
            object(6, "cup", v(4.6, 2.4, 0.75), v(4.7, 2.5, 0.85)),
            human(
                20,
                v(0.425, 1.025, 0.025),
                v(0.875, 1.375, 1.725),
                v(0.6, 0.5, 0.9),
            ),
            human(
                21,
                v(3.925, 3.325, 0.025),
                v(4.275, 3.675, 1.325),
                v(4.2, 2.45, 0.77),
            ),
            human(
                22,
                v(2.625, 2.625, 0.025),
                v(2.975, 2.975, 1.725),
                v(4.1, 3.5, 1.2),
            ),
        ],
    };
    let target = v(2.5, 2.2, 0.6);
    SceneSpec {
        name: "scene_2",
        prefix: "s2",
        scene,
        cameras: vec![
            (v(2.5, -2.4, 2.6), target),
            (v(7.4, 2.2, 2.6), target),
            (v(-2.2, 2.0, 2.6), target),
            (v(2.5, 7.4, 2.8), v(2.5, 2.0, 0.6)),
        ],
        relationships: vec![
            (20, 1, "COOK"),
            (21, 4, "USE"),
            (21, 5, "SIT"),
            (22, 21, "SPEAK"),
            (21, 22, "LISTEN"),
        ],
        false_claims: vec![(22, 2, "SEE")],
        missed: vec![(21, 22, "LISTEN")],
        one_off: vec![(20, 6, "USE")],
        queries: vec![
            (
                "s2_q1",
                QueryCategory::Spatial,
                "Who is standing next to the stove?",
                vec![20],
            ),
            (
                "s2_q2",
                QueryCategory::Activity,
                "Who is using the laptop?",
                vec![21],
            ),
            (
                "s2_q3",
                QueryCategory::Functional,
                "Who could use a fresh cup of coffee?",
                vec![21],
            ),
            (
                "s2_q4",
                QueryCategory::Spatial,
                "Who is nearest the fridge?",
                vec![22],
            ),
        ],
        answers: BTreeMap::from([
            ("s2_q1", vec![20]),
            ("s2_q2", vec![21]),
            ("s2_q3", vec![21]),
            ("s2_q4", vec![20]),
        ]),
    }
}

fn raw_label(frame: &str, k: usize) -> &'static str {
    let options: &[&str] = match frame {
        "SEE" => &["watching", "looking at"],
        "SIT" => &["sitting on", "seated on"],
        "SPEAK" => &["talking to", "chatting with"],
        "LISTEN" => &["listening to"],
        "READ" => &["reading"],
        "COOK" => &["cooking on", "stirring a pot on"],
        "USE" => &["typing on", "using"],
        _ => &["doing something with"],
    };
    options[k % options.len()]
}

/// Stands in for a vision-language model by reading the prompts.
struct Oracle {
    scene: SyntheticScene,
    claims: Vec<(u32, u32, &'static str)>,
    one_off: Vec<(u32, u32, &'static str)>,
    /// Predicted human id to ground-truth human id, learned from prompts.
    ids: Mutex<BTreeMap<u32, u32>>,
}

fn line_json(prompt: &str, key: &str) -> Value {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .and_then(|rest| serde_json::from_str(rest.trim()).ok())
        .unwrap_or(Value::Null)
}

fn frame_index(image_ref: Option<&str>) -> usize {
    image_ref
        .and_then(|r| r.split('_').nth(1))
        .and_then(|f| f.trim_start_matches('f').parse().ok())
        .unwrap_or(0)
}

impl Oracle {
    fn new(spec: &SceneSpec) -> Self {
        let claims = spec
            .relationships
            .iter()
            .filter(|r| !spec.missed.contains(r))
            .chain(&spec.false_claims)
            .copied()
            .collect();
        Oracle {
            scene: spec.scene.clone(),
            claims,
            one_off: spec.one_off.clone(),
            ids: Mutex::new(BTreeMap::new()),
        }
    }

    fn gt_human_near(&self, x: f64, y: f64) -> u32 {
        self.scene
            .instances
            .iter()
            .filter(|i| i.kind == DetectionKind::Human)
            .map(|i| {
                let c = i.primitive.center();
                (((c.x - x).powi(2) + (c.y - y).powi(2)), i.id)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, id)| id)
            .expect("scene has humans")
    }

    fn claims_for(&self, k: usize) -> Vec<(u32, u32, &'static str)> {
        let mut c = self.claims.clone();
        if k == 0 {
            c.extend(&self.one_off);
        }
        c
    }

    fn is_human(&self, id: u32) -> bool {
        self.scene
            .instance(id)
            .is_some_and(|i| i.kind == DetectionKind::Human)
    }

    fn behaviors(&self, req: &InferenceRequest) -> Value {
        let markers = line_json(&req.prompt_text, "Markers:");
        let humans: Vec<Value> = markers
            .as_array()
            .into_iter()
            .flatten()
            .map(|m| {
                let c = &m["center"];
                let g =
                    self.gt_human_near(c[0].as_f64().unwrap_or(0.0), c[1].as_f64().unwrap_or(0.0));
                let posture = match &self.scene.instance(g).map(|i| i.primitive) {
                    Some(Primitive::Box { max, .. }) if max.z < 1.5 => "sitting",
                    _ => "standing",
                };
                json!({
                    "marker": m["marker"],
                    "posture": posture,
                    "gaze": "focused ahead",
                    "physical_state": "relaxed",
                    "attributes": ["casual clothes"],
                })
            })
            .collect();
        json!({ "humans": humans })
    }

    fn proposals(&self, req: &InferenceRequest) -> Value {
        let people = line_json(&req.prompt_text, "People:");
        let objects = line_json(&req.prompt_text, "Objects:");
        let object_ids: Vec<u64> = objects
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|o| o["id"].as_u64())
            .collect();
        let k = frame_index(req.image_ref.as_deref());
        let mut present: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
        for p in people.as_array().into_iter().flatten() {
            let c = &p["center"];
            let g = self.gt_human_near(c[0].as_f64().unwrap_or(0.0), c[1].as_f64().unwrap_or(0.0));
            let id = p["id"].as_u64().unwrap_or(0);
            self.ids.lock().unwrap().insert(id as u32, g);
            present.insert(g, (p["marker"].as_u64().unwrap_or(0), id));
        }
        let mut local = Vec::new();
        let mut remote = Vec::new();
        for (&g, &(marker, _)) in &present {
            for &(_, t, frame) in self.claims_for(k).iter().filter(|c| c.0 == g) {
                let target = if self.is_human(t) {
                    present.get(&t).map(|p| p.1)
                } else {
                    object_ids.contains(&u64::from(t)).then_some(u64::from(t))
                };
                let item = json!({
                    "human_marker": marker,
                    "target": target,
                    "raw_label": raw_label(frame, k),
                    "frame": frame,
                });
                if target.is_some() {
                    local.push(item);
                } else {
                    remote.push(item);
                }
            }
        }
        json!({ "local": local, "remote": remote })
    }

    fn solve(&self, req: &InferenceRequest) -> Value {
        let ctx: Value = req
            .context_json
            .as_deref()
            .and_then(|c| serde_json::from_str(c).ok())
            .unwrap_or(Value::Null);
        let pred = ctx["human_id"].as_u64().unwrap_or(0) as u32;
        let frame = ctx["proposal"]["frame"].as_str().unwrap_or("");
        let raw = ctx["proposal"]["raw_label"].as_str().unwrap_or("");
        let ids = self.ids.lock().unwrap().clone();
        let Some(&g) = ids.get(&pred) else {
            return json!({ "resolutions": [] });
        };
        let visible: Vec<u32> = ctx["visible"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|e| e["id"].as_u64().map(|i| i as u32))
            .collect();
        let mut out = Vec::new();
        let all = self.claims_for(0);
        for &(_, t, _) in all.iter().filter(|c| c.0 == g && c.2 == frame) {
            let hit = visible.iter().find(|&&e| {
                if self.is_human(t) {
                    ids.get(&e) == Some(&t)
                } else {
                    e == t
                }
            });
            if let Some(&e) = hit {
                out.push(json!({
                    "human_id": pred,
                    "entity_id": e,
                    "raw_label": raw,
                    "frame": frame,
                    "confidence": 0.9,
                }));
            }
        }
        json!({ "resolutions": out })
    }
}

impl InferenceBackend for Oracle {
    fn backend_id(&self) -> &str {
        "oracle"
    }

    fn call(&self, req: &InferenceRequest) -> Result<String, InferenceError> {
        let payload = match req.stage {
            Stage::BehaviorDescription => self.behaviors(req),
            Stage::ActivityProposal => self.proposals(req),
            Stage::RemoteSolver => self.solve(req),
            Stage::QueryAnswer => {
                return Err(InferenceError::BackendUnavailable("use QueryOracle".into()))
            }
        };
        Ok(payload.to_string())
    }
}

/// Answers benchmark questions with the predicted ids of chosen humans.
struct QueryOracle {
    answers: BTreeMap<String, Vec<u32>>,
}

impl QueryOracle {
    fn new(spec: &SceneSpec, graph: &SocialSceneGraph) -> Self {
        let mut answers = BTreeMap::new();
        for (qid, _, text, _) in &spec.queries {
            let ids = spec.answers[qid]
                .iter()
                .filter_map(|&g| {
                    let c = spec.scene.instance(g)?.primitive.center();
                    graph
                        .humans()
                        .map(|h| {
                            let p = h.center;
                            ((p.x - c.x).powi(2) + (p.y - c.y).powi(2), h.id.0)
                        })
                        .min_by(|a, b| a.0.total_cmp(&b.0))
                        .map(|(_, id)| id)
                })
                .collect();
            answers.insert(text.to_string(), ids);
        }
        QueryOracle { answers }
    }
}

impl InferenceBackend for QueryOracle {
    fn backend_id(&self) -> &str {
        "query-oracle"
    }

    fn call(&self, req: &InferenceRequest) -> Result<String, InferenceError> {
        let text = req
            .prompt_text
            .lines()
            .find_map(|l| l.strip_prefix("Question: "))
            .unwrap_or("");
        let ids = self.answers.get(text).cloned().unwrap_or_default();
        Ok(json!({ "candidates": ids }).to_string())
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    let mut s = serde_json::to_string_pretty(value).expect("json");
    s.push('\n');
    fs::write(path, s).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
}

fn write_scene(spec: &SceneSpec, root: &Path) {
    let dir = root.join(spec.name);
    let frames_dir = dir.join("frames");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&frames_dir).unwrap();
    fs::create_dir_all(&masks_dir).unwrap();
    spec.scene
        .cloud(SPACING)
        .save_ply(&dir.join("cloud.ply"))
        .unwrap();
    fs::write(
        dir.join("base_graph.json"),
        spec.scene.object_graph(SPACING).to_full_json(),
    )
    .unwrap();
    let rels: Vec<GroundTruthRelationship> = spec
        .relationships
        .iter()
        .map(|&(h, t, f)| GroundTruthRelationship {
            human_id: h,
            target_id: t,
            target_class: spec.scene.instance(t).unwrap().class_label.clone(),
            frame: f.into(),
        })
        .collect();
    write_json(&dir.join("relationships.json"), &rels);
    let queries: Vec<BenchmarkQuery> = spec
        .queries
        .iter()
        .map(|(id, category, text, gt)| BenchmarkQuery {
            id: id.to_string(),
            text: text.to_string(),
            category: *category,
            gt_ids: gt.clone(),
        })
        .collect();
    write_json(&dir.join("queries.json"), &queries);

    let k = intrinsics();
    let mut records = Vec::new();
    for (i, &(eye, target)) in spec.cameras.iter().enumerate() {
        let fid = format!("{}_f{i}", spec.prefix);
        let pose = look_at_camera(eye, target);
        let frame = render(&spec.scene, &k, &pose);
        let (detections, masks, head_poses) = detect(&spec.scene, &frame, &k, &pose, MIN_PIXELS);
        frame
            .rgb
            .save(frames_dir.join(format!("{fid}_rgb.png")))
            .unwrap();
        frame
            .depth
            .save_png(&frames_dir.join(format!("{fid}_depth.png")))
            .unwrap();
        let mut mask_refs = Vec::new();
        for (j, m) in masks.iter().enumerate() {
            let name = format!("{fid}_{j}.png");
            m.save_png(&masks_dir.join(&name)).unwrap();
            mask_refs.push(Some(format!("../masks/{name}")));
        }
        let labels: Vec<&str> = detections.iter().map(|d| d.1.as_str()).collect();
        eprintln!("{fid}: {labels:?}");
        records.push(FrameRecord {
            frame_id: fid.clone(),
            rgb: format!("{fid}_rgb.png"),
            depth: format!("{fid}_depth.png"),
            intrinsics: k,
            camera_pose: rigid_to_row_major(&pose),
            detections,
            masks: mask_refs,
            head_poses,
        });
    }
    write_json(
        &frames_dir.join("manifest.json"),
        &FrameManifest { frames: records },
    );
}

/// Mirrors the CLI: base lexicon plus the frames already in the glossary.
fn lexicon_for(graph: &SocialSceneGraph) -> FrameLexicon {
    let mut lex = FrameLexicon::base();
    for frame in graph.glossary().keys() {
        lex.ensure_frame(frame);
    }
    lex
}

fn main() {
    let root = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "crates/core/fixtures/benchmark".into()),
    );
    let specs = [living_room(), kitchen()];
    for spec in &specs {
        write_scene(spec, &root);
    }

    let mut records: Vec<ScenarioRecord> = Vec::new();
    let eval = EvalConfig::default();
    let mut all_results = Vec::new();
    for spec in &specs {
        let scene = load_scene(&root.join(spec.name)).expect("scene loads");
        let manifest_path = scene.manifest_path();
        let manifest = FrameManifest::load(&manifest_path).unwrap();
        let base_text = fs::read_to_string(root.join(spec.name).join("base_graph.json")).unwrap();
        let mut graph = SocialSceneGraph::from_full_json(&base_text).unwrap();
        let mut lexicon = lexicon_for(&graph);
        let backend = RecordingBackend::new(Oracle::new(spec));
        let summaries = augment(
            &manifest,
            manifest_path.parent().unwrap(),
            &mut graph,
            &mut lexicon,
            &backend,
            &PipelineConfig::default(),
        );
        for s in &summaries {
            eprintln!(
                "{}: humans {:?}, edges {}, errors {:?}, skipped {:?}",
                s.frame_id, s.humans, s.edges_upserted, s.errors, s.skipped
            );
            for p in &s.proposals {
                eprintln!("    {:?} {:?} {:?}", p.proposal.frame, p.status, p.reason);
            }
        }
        records.extend(backend.records());

        let raw = SocialSceneGraph::from_full_json(&graph.to_full_json()).unwrap();
        let mut lex = lexicon_for(&raw);
        let (consolidated, log) = consolidate(&raw, &mut lex, &PruningConfig::default());
        eprintln!("{}: pruned {:?}", spec.name, log.pruned);
        for e in consolidated.activity_edges() {
            eprintln!(
                "    edge {} -> {} {} x{}",
                e.from_id, e.to_id, e.frame, e.detection_count
            );
        }
        let row = evaluate_relationships(&consolidated, &scene, &FrameLexicon::base(), &eval);
        eprintln!("{}: {:?}", spec.name, row.metrics);

        let qb = RecordingBackend::new(QueryOracle::new(spec, &consolidated));
        let answers = answer_queries_llm(&scene, &consolidated, &qb, &eval).unwrap();
        records.extend(qb.records());
        all_results.extend(score_queries(&answers, &scene, &consolidated, &eval));
    }
    eprint!(
        "{}",
        QueryScores::from_results(&all_results).render_table("fixture")
    );
    write_json(&root.join("scenario.json"), &records);

    let bench = load_benchmark(&root).expect("benchmark loads");
    let total = bench.stats().total;
    write_json(
        &root.join("benchmark.json"),
        &json!({
            "name": "fixture",
            "scenes": specs.iter().map(|s| s.name).collect::<Vec<_>>(),
            "expected": {
                "humans": total.humans,
                "relationships": total.relationships,
                "queries": total.query_total,
                "points": total.points,
            }
        }),
    );
}
