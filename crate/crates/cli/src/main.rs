//! `s3dsg` command-line driver.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use s3dsg_core::benchmark::{
    answer_queries_llm, evaluate_relationships, load_benchmark, query_report_json,
    render_stats_table, score_queries, Benchmark, EvalConfig, MetricsReport, QueryScores,
};
use s3dsg_core::consolidation::{consolidate, PruningConfig};
use s3dsg_core::inference::{
    fingerprint, HttpBackend, HttpConfig, InferenceBackend, ScriptedBackend,
};
use s3dsg_core::pipeline::{augment, FrameManifest, PipelineConfig, ProposalStatus};
use s3dsg_core::planner::{
    extract_segments, plan, rasterize_cost, render_svg, Combination, CostTable, GridConfig,
    OccupancyGrid, Plan, SocialCostField,
};
use s3dsg_core::{FrameLexicon, NodeId, SocialSceneGraph};

#[derive(Parser)]
#[command(name = "s3dsg", version, about = "Social scene graph tools")]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// TOML run configuration.
    #[arg(long, env = "S3DSG_CONFIG", global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add humans and activity edges to a graph from RGB-D frames.
    Augment(AugmentArgs),
    /// Canonicalize and prune activity edges.
    Consolidate(ConsolidateArgs),
    /// Score predicted graphs against benchmark relationships.
    Evaluate(EvaluateArgs),
    /// Answer benchmark queries and score them.
    Query(QueryArgs),
    /// Plan a path with and without social costs.
    Plan(PlanArgs),
    /// Print benchmark statistics.
    Stats(StatsArgs),
    /// Print the request fingerprint used by scripted backends.
    Fingerprint(FingerprintArgs),
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Frame manifest; paths inside resolve against its directory.
    #[arg(long)]
    frames: PathBuf,
    /// `scripted:PATH` or `http`.
    #[arg(long)]
    backend: String,
    #[arg(long)]
    out: PathBuf,
    /// Per-frame summaries as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Where annotated images are written.
    #[arg(long)]
    image_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ConsolidateArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_min: Option<u32>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    benchmark: PathBuf,
    /// Directory holding `<scene>.json` graphs.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    table: bool,
    #[arg(long)]
    iou: Option<f64>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    backend: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    graph: PathBuf,
    /// `x,y` in world meters.
    #[arg(long, value_parser = parse_xy, allow_hyphen_values = true)]
    start: (f64, f64),
    #[arg(long, value_parser = parse_xy, allow_hyphen_values = true)]
    goal: (f64, f64),
    /// JSON or TOML table of `FRAME = {c_rel, radius}`.
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Add overlapping fields instead of taking their maximum.
    #[arg(long)]
    sum: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FingerprintArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    image_ref: Option<String>,
    #[arg(long)]
    context: Option<String>,
}

/// Settings shared by several commands. Flags override these.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    pruning: PruningConfig,
    pipeline: PipelineConfig,
    eval: EvalConfig,
    planner: PlannerSection,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PlannerSection {
    grid: GridConfig,
    costs: Option<CostTable>,
}

fn parse_xy(s: &str) -> Result<(f64, f64), String> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| format!("expected x,y, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(x)?, p(y)?))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes through a sibling temp file so readers never see partial output.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_graph(path: &Path) -> Result<SocialSceneGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SocialSceneGraph::from_full_json(&text).with_context(|| format!("loading {}", path.display()))
}

fn make_backend(spec: &str) -> Result<Box<dyn InferenceBackend>> {
    if let Some(path) = spec.strip_prefix("scripted:") {
        let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        let b = ScriptedBackend::from_json(&text).with_context(|| format!("loading {path}"))?;
        return Ok(Box::new(b));
    }
    if spec == "http" {
        return Ok(Box::new(HttpBackend::new(HttpConfig::from_env()?)));
    }
    bail!("unknown backend `{spec}`; use scripted:PATH or http")
}

/// Base lexicon plus every frame the graph's glossary already names.
fn lexicon_for(graph: &SocialSceneGraph) -> FrameLexicon {
    let mut lex = FrameLexicon::base();
    for frame in graph.glossary().keys() {
        lex.ensure_frame(frame);
    }
    lex
}

fn json_line<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn run_augment(args: AugmentArgs, cfg: RunConfig) -> Result<()> {
    let mut graph = read_graph(&args.graph)?;
    let manifest = FrameManifest::load(&args.frames)?;
    let base_dir = args.frames.parent().unwrap_or(Path::new("."));
    let backend = make_backend(&args.backend)?;
    let mut lexicon = lexicon_for(&graph);
    let mut pcfg = cfg.pipeline;
    if let Some(dir) = args.image_dir {
        fs::create_dir_all(&dir)?;
        pcfg.image_dir = Some(dir);
    }
    let summaries = augment(
        &manifest,
        base_dir,
        &mut graph,
        &mut lexicon,
        backend.as_ref(),
        &pcfg,
    );
    for s in &summaries {
        log::info!(
            "{}: {} humans, {} resolved, {} rejected, {} errored{}",
            s.frame_id,
            s.humans.len(),
            s.count(ProposalStatus::Resolved),
            s.count(ProposalStatus::Rejected),
            s.count(ProposalStatus::Errored),
            s.skipped
                .as_deref()
                .map(|r| format!(" (skipped: {r})"))
                .unwrap_or_default()
        );
    }
    graph.validate()?;
    write_atomic(&args.out, graph.to_full_json().as_bytes())?;
    if let Some(report) = args.report {
        write_atomic(&report, &json_line(&summaries)?)?;
    }
    println!(
        "{} frames, {} humans, {} activity edges",
        summaries.len(),
        graph.humans().count(),
        graph.activity_edge_count()
    );
    Ok(())
}

fn run_consolidate(args: ConsolidateArgs, cfg: RunConfig) -> Result<()> {
    let mut pruning = cfg.pruning;
    if let Some(t) = args.tau {
        pruning.tau = t;
    }
    if let Some(n) = args.n_min {
        pruning.n_min = n;
    }
    pruning.validate()?;
    let graph = read_graph(&args.graph)?;
    let mut lexicon = lexicon_for(&graph);
    let (out, log) = consolidate(&graph, &mut lexicon, &pruning);
    write_atomic(&args.out, out.to_full_json().as_bytes())?;
    if let Some(p) = args.log {
        write_atomic(&p, &json_line(&log)?)?;
    }
    println!(
        "{} edges kept, {} merged, {} pruned",
        out.activity_edge_count(),
        log.merged_edges,
        log.pruned.len()
    );
    Ok(())
}

fn prediction_for(dir: &Path, scene: &str) -> Result<SocialSceneGraph> {
    read_graph(&dir.join(format!("{scene}.json")))
}

fn run_evaluate(args: EvaluateArgs, cfg: RunConfig) -> Result<()> {
    let mut eval = cfg.eval;
    if let Some(iou) = args.iou {
        eval.iou_threshold = iou;
    }
    eval.validate().map_err(|e| anyhow!(e))?;
    let bench = load_benchmark(&args.benchmark)?;
    let lexicon = FrameLexicon::base();
    let mut rows = Vec::new();
    for scene in &bench.scenes {
        let graph = prediction_for(&args.predictions, &scene.name)?;
        rows.push(evaluate_relationships(&graph, scene, &lexicon, &eval));
    }
    let report = MetricsReport::from_rows(rows);
    if let Some(out) = &args.out {
        write_atomic(out, report.to_json().as_bytes())?;
    }
    if args.table || args.out.is_none() {
        print!("{}", report.render_table());
    }
    Ok(())
}

fn run_query(args: QueryArgs, cfg: RunConfig) -> Result<()> {
    let eval = cfg.eval;
    eval.validate().map_err(|e| anyhow!(e))?;
    let bench = load_benchmark(&args.benchmark)?;
    let backend = make_backend(&args.backend)?;
    let mut results = BTreeMap::new();
    for scene in &bench.scenes {
        let graph = prediction_for(&args.predictions, &scene.name)?;
        let answers: BTreeMap<String, Vec<NodeId>> =
            answer_queries_llm(scene, &graph, backend.as_ref(), &eval)?;
        results.insert(
            scene.name.clone(),
            score_queries(&answers, scene, &graph, &eval),
        );
    }
    if let Some(out) = &args.out {
        write_atomic(out, query_report_json(&results).as_bytes())?;
    }
    if args.table || args.out.is_none() {
        let all: Vec<_> = results.values().flatten().cloned().collect();
        print!("{}", QueryScores::from_results(&all).render_table("graph"));
    }
    Ok(())
}

fn load_costs(path: &Path) -> Result<CostTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text)?
    } else {
        serde_json::from_str(&text)?
    };
    Ok(table)
}

#[derive(Serialize)]
struct PlanReport<'a> {
    social: &'a Plan,
    baseline: &'a Plan,
    segments: usize,
}

fn run_plan(args: PlanArgs, cfg: RunConfig) -> Result<()> {
    let graph = read_graph(&args.graph)?;
    let table = match (&args.costs, cfg.planner.costs) {
        (Some(p), _) => load_costs(p)?,
        (None, Some(t)) => t,
        (None, None) => CostTable::default(),
    };
    let grid = OccupancyGrid::from_graph(&graph, &cfg.planner.grid)?;
    let cell = |(x, y): (f64, f64)| {
        grid.world_to_cell(x, y)
            .ok_or_else(|| anyhow!("({x}, {y}) lies outside the map"))
    };
    let (start, goal) = (cell(args.start)?, cell(args.goal)?);
    let field = SocialCostField {
        segments: extract_segments(&graph, &table),
        combination: if args.sum {
            Combination::Sum
        } else {
            Combination::Max
        },
    };
    let empty = SocialCostField {
        segments: Vec::new(),
        combination: field.combination,
    };
    let social_costs = rasterize_cost(&grid, &field);
    let social = plan(&social_costs, start, goal)?;
    let mut baseline = plan(&rasterize_cost(&grid, &empty), start, goal)?;
    // Exposure of the blind route to the actual field.
    baseline.social_cost = social_costs_along(&social_costs, &baseline);
    let report = PlanReport {
        social: &social,
        baseline: &baseline,
        segments: field.segments.len(),
    };
    if let Some(out) = &args.out {
        write_atomic(out, &json_line(&report)?)?;
    }
    if let Some(svg) = &args.svg {
        let doc = render_svg(
            &social_costs,
            &field,
            &[
                (&baseline, "#888888", "baseline"),
                (&social, "#1f77b4", "social"),
            ],
        );
        write_atomic(svg, doc.as_bytes())?;
    }
    println!(
        "social: length {:.2} m, social cost {:.3}; baseline: length {:.2} m, social cost {:.3}",
        social.length, social.social_cost, baseline.length, baseline.social_cost
    );
    Ok(())
}

/// Social cost a plan would incur on `costs`, using the planner's step rule.
fn social_costs_along(costs: &s3dsg_core::planner::CostGrid, p: &Plan) -> f64 {
    p.cells
        .windows(2)
        .map(|w| {
            let diag = w[0].0 != w[1].0 && w[0].1 != w[1].1;
            let step = costs.grid.resolution * if diag { std::f64::consts::SQRT_2 } else { 1.0 };
            step * costs.social[costs.grid.index(w[1])]
        })
        .sum()
}

fn run_stats(args: StatsArgs) -> Result<bool> {
    let bench: Benchmark = load_benchmark(&args.benchmark)?;
    let stats = bench.stats();
    if args.json {
        print!("{}", String::from_utf8(json_line(&stats)?)?);
    } else {
        print!("{}", render_stats_table(&stats));
    }
    match bench.check_expected() {
        Ok(()) => Ok(true),
        Err(problems) => {
            for p in problems {
                eprintln!("mismatch: {p}");
            }
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = load_config(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Augment(a) => run_augment(a, cfg).map(|_| true),
        Command::Consolidate(a) => run_consolidate(a, cfg).map(|_| true),
        Command::Evaluate(a) => run_evaluate(a, cfg).map(|_| true),
        Command::Query(a) => run_query(a, cfg).map(|_| true),
        Command::Plan(a) => run_plan(a, cfg).map(|_| true),
        Command::Stats(a) => run_stats(a),
        Command::Fingerprint(a) => {
            println!(
                "{}",
                fingerprint(&a.prompt, a.image_ref.as_deref(), a.context.as_deref())
            );
            Ok(true)
        }
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
