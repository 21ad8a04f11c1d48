//! The committed two-scene benchmark fixture: schema, statistics, and a
//! scripted replay of the whole augmentation path.

use std::path::{Path, PathBuf};

use s3dsg_core::benchmark::{
    evaluate_relationships, load_benchmark, BenchmarkError, EvalConfig, ENV_BENCHMARK_ROOT,
};
use s3dsg_core::consolidation::{consolidate, PruningConfig};
use s3dsg_core::inference::ScriptedBackend;
use s3dsg_core::pipeline::{augment, FrameManifest, PipelineConfig};
use s3dsg_core::{FrameLexicon, SocialSceneGraph};

fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/benchmark")
}

#[test]
fn fixture_statistics_match_its_manifest() {
    let bench = load_benchmark(&fixture_root()).unwrap();
    assert_eq!(bench.scenes.len(), 2);
    let stats = bench.stats();
    let expected = bench.manifest.as_ref().unwrap().expected.unwrap();
    assert_eq!(stats.total.humans, expected.humans);
    assert_eq!(stats.total.relationships, expected.relationships);
    assert_eq!(stats.total.query_total, expected.queries);
    assert_eq!(stats.total.points, expected.points);
    bench.check_expected().unwrap();
    for scene in &bench.scenes {
        assert_eq!(scene.frames.frames.len(), 4);
        assert!(scene
            .queries
            .iter()
            .all(|q| (1..=2).contains(&q.gt_ids.len())));
    }
}

#[test]
fn full_dataset_counts_when_available() {
    let Ok(root) = std::env::var(ENV_BENCHMARK_ROOT) else {
        eprintln!("{ENV_BENCHMARK_ROOT} not set; skipping full dataset check");
        return;
    };
    let stats = load_benchmark(Path::new(&root)).unwrap().stats();
    assert_eq!(stats.scenes.len(), 8);
    assert_eq!(stats.total.humans, 42);
    assert_eq!(stats.total.relationships, 110);
    assert_eq!(stats.total.query_total, 80);
    assert_eq!(stats.total.points, 105);
}

#[test]
fn missing_root_is_an_error() {
    let err = load_benchmark(Path::new("/nonexistent/benchmark")).unwrap_err();
    assert!(matches!(err, BenchmarkError::Io { .. }), "{err:?}");
}

fn lexicon_for(graph: &SocialSceneGraph) -> FrameLexicon {
    let mut lexicon = FrameLexicon::base();
    for frame in graph.glossary().keys() {
        lexicon.ensure_frame(frame);
    }
    lexicon
}

/// Augments and consolidates one scene from the recorded scenario.
fn replay(scene: &str, backend: &ScriptedBackend) -> SocialSceneGraph {
    let dir = fixture_root().join(scene);
    let text = std::fs::read_to_string(dir.join("base_graph.json")).unwrap();
    let mut graph = SocialSceneGraph::from_full_json(&text).unwrap();
    let manifest = FrameManifest::load(&dir.join("frames/manifest.json")).unwrap();
    let mut lexicon = lexicon_for(&graph);
    let summaries = augment(
        &manifest,
        &dir.join("frames"),
        &mut graph,
        &mut lexicon,
        backend,
        &PipelineConfig::default(),
    );
    for s in &summaries {
        assert!(s.skipped.is_none(), "{}: {:?}", s.frame_id, s.skipped);
        assert!(s.errors.is_empty(), "{}: {:?}", s.frame_id, s.errors);
    }
    // Same hand-off as the command line: through the file encoding.
    let graph = SocialSceneGraph::from_full_json(&graph.to_full_json()).unwrap();
    let mut lexicon = lexicon_for(&graph);
    consolidate(&graph, &mut lexicon, &PruningConfig::default()).0
}

#[test]
fn scripted_replay_is_deterministic_and_scores_as_recorded() {
    let scenario = std::fs::read_to_string(fixture_root().join("scenario.json")).unwrap();
    let backend = ScriptedBackend::from_json(&scenario).unwrap();
    let bench = load_benchmark(&fixture_root()).unwrap();
    let mut f1 = Vec::new();
    for scene in &bench.scenes {
        let first = replay(&scene.name, &backend);
        let second = replay(&scene.name, &backend);
        assert_eq!(first.to_full_json(), second.to_full_json());
        assert_eq!(first.humans().count(), scene.humans().len());
        let row =
            evaluate_relationships(&first, scene, &FrameLexicon::base(), &EvalConfig::default());
        f1.push((row.metrics.tp, row.metrics.fp, row.metrics.fn_));
    }
    // One scene is recovered exactly; the other carries one false claim
    // and one missed relationship by construction.
    assert_eq!(f1, vec![(6, 0, 0), (4, 1, 1)]);
}
