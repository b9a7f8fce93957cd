//! The `trailgraph` command line.
//!
//! Every subcommand reads its inputs from files, writes results to `--out`
//! style paths, and prints a short summary. With `--json` the summary is a
//! single [`RunReport`] document on stdout instead. Exit codes: 0 on
//! success, 1 on usage and validation errors, 2 on I/O errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use trailgraph_core::assembly::{extract_graph_scored, Coverage};
use trailgraph_core::dataset::{partition, simulate_prompts, Decision, PartitionConfig, PromptConfig};
use trailgraph_core::features::{edge_features, pair_candidates, vertex_points, CandidateEdge};
use trailgraph_core::head::{directed_tokens, score_candidates, train, HeadShape, HeadWeights, TrainBatch, TrainConfig};
use trailgraph_core::metrics::{apls, topo, MetricConfig};
use trailgraph_core::nms::{mask_to_candidates_with_boost, unified_nms, Source};
use trailgraph_core::raster::Pyramid;
use trailgraph_core::synth::{make_edge_dataset, make_scene, synthetic_extraction, SceneSpec, SyntheticTraining};
use trailgraph_core::{ExtractionConfig, PatchLayout, Point, Raster, RoadGraph};

use crate::error::{Error, Result};
use crate::formats::{
    read_graph, read_json, read_prompts, read_raster, read_text, read_vertices, read_weights, write_graph, write_json,
    write_raster, write_vertices, write_weights, GraphDoc,
};
use crate::pipeline::{bench_nms, extract_tiled_parallel, with_threads, RunReport, Timings};
use crate::provider::TilesProvider;
use crate::service::{addr_from_env, serve, weights_from_env, AppState};

#[derive(Debug, Parser)]
#[command(name = "trailgraph", version, about = "Road graph extraction from segmentation masks")]
struct Cli {
    /// Print a single JSON report on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// JSON file with extraction settings; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread cap; defaults to the number of cores.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect vertices from road and keypoint masks.
    Nms(NmsArgs),
    /// Time unified against three-pass suppression on random candidates.
    BenchNms(BenchArgs),
    /// Candidate edges with geometric and path features.
    Features(FeaturesArgs),
    /// Train the edge head.
    TrainHead(TrainArgs),
    /// Score candidate edges between given vertices.
    Score(ScoreArgs),
    /// Extract a graph from one pair of masks.
    Extract(ExtractArgs),
    /// Extract a graph from a directory of mask tiles.
    ExtractTiled(TiledArgs),
    /// Compare a proposal graph with a reference.
    Eval(EvalArgs),
    /// Select training patches from a large annotated graph.
    Partition(PartitionArgs),
    /// Simulate user clicks on a reference graph.
    SimulatePrompts(PromptArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Convert graphs and rasters between file formats.
    Convert(ConvertArgs),
    /// Render a synthetic scene.
    Synth(SynthArgs),
}

/// Flags that override fields of the extraction config.
#[derive(Debug, Clone, Default, Args, Serialize)]
struct ConfigFlags {
    /// Suppression radius in pixels.
    #[arg(long, visible_alias = "radius")]
    nms_radius: Option<f64>,
    /// Mask probability threshold.
    #[arg(long, visible_alias = "threshold")]
    mask_threshold: Option<f64>,
    /// Largest vertex distance considered for an edge
    #[arg(long)]
    pair_radius: Option<f64>,
    /// Nearest neighbours kept per vertex
    #[arg(long)]
    k_max: Option<usize>,
    /// Minimum edge score to keep an edge
    #[arg(long)]
    edge_threshold: Option<f64>,
    /// Score bonus for keypoint candidates during suppression
    #[arg(long)]
    keypoint_boost: Option<f64>,
    /// Softmin temperature for path features
    #[arg(long)]
    tau: Option<f64>,
    /// Samples per candidate path
    #[arg(long)]
    samples: Option<usize>,
}

impl ConfigFlags {
    fn any(&self) -> bool {
        self.nms_radius.is_some()
            || self.mask_threshold.is_some()
            || self.pair_radius.is_some()
            || self.k_max.is_some()
            || self.edge_threshold.is_some()
            || self.keypoint_boost.is_some()
            || self.tau.is_some()
            || self.samples.is_some()
    }
}

#[derive(Debug, Args, Serialize)]
struct NmsArgs {
    /// Keypoint probability mask
    #[arg(long)]
    keypoints: PathBuf,
    /// Road probability mask
    #[arg(long)]
    road: PathBuf,
    /// Output file
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 8.0)]
    radius: f64,
}

#[derive(Debug, Args, Serialize)]
struct FeaturesArgs {
    /// Road probability mask
    #[arg(long)]
    road: PathBuf,
    #[arg(long)]
    vertices: PathBuf,
    /// Output file
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Feature file written by `features`.
    #[arg(long, requires = "labels", conflicts_with = "synthetic")]
    edges: Option<PathBuf>,
    /// JSON array of 0/1 labels, one per edge in the feature file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Train on this many generated scenes instead of files.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Output file
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    /// Edge head weights
    #[arg(long)]
    weights: PathBuf,
    /// Road probability mask
    #[arg(long)]
    road: PathBuf,
    #[arg(long)]
    vertices: PathBuf,
    /// Output file
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Debug, Args, Serialize)]
struct ExtractArgs {
    /// Road probability mask
    #[arg(long)]
    road: PathBuf,
    /// Keypoint probability mask
    #[arg(long)]
    keypoints: PathBuf,
    /// Edge head weights
    #[arg(long)]
    weights: PathBuf,
    /// Output file
    #[arg(long)]
    out: PathBuf,
    /// Also write the mean score of each kept edge.
    #[arg(long)]
    scores: bool,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Debug, Args, Serialize)]
struct TiledArgs {
    #[arg(long)]
    tiles: PathBuf,
    /// Image width, image height, patch size and stride.
    #[arg(long, num_args = 4, value_names = ["W", "H", "P", "S"])]
    layout: Vec<usize>,
    /// Edge head weights
    #[arg(long)]
    weights: PathBuf,
    /// Output file
    #[arg(long)]
    out: PathBuf,
    /// Restrict extraction to patches holding positive prompts.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    scores: bool,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    prop: PathBuf,
    #[arg(long)]
    apls: bool,
    #[arg(long)]
    topo: bool,
    #[arg(long)]
    json_out: Option<PathBuf>,
    #[arg(long)]
    snap_radius: Option<f64>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    match_radius: Option<f64>,
    #[arg(long)]
    interval: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct PartitionArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    tau_density: Option<f64>,
    #[arg(long)]
    tau_sim: Option<f64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride_base: Option<usize>,
    #[arg(long)]
    stride_dense: Option<usize>,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PromptArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Image size; defaults to the graph's bounding box.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    n_pos: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    dist_min: Option<f64>,
    /// Output file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ServeArgs {
    /// Listen address; defaults to TRAILGRAPH_ADDR or 127.0.0.1:8080.
    #[arg(long)]
    addr: Option<String>,
    /// Head weights; defaults to TRAILGRAPH_WEIGHTS.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Debug, Args, Serialize)]
struct ConvertArgs {
    /// Source file: .json graph, or .rpm, .pgm or .csv raster.
    input: PathBuf,
    /// Target file; the format follows the extension.
    output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    /// Scene spec JSON; missing fields take defaults and `--seed` sets the seed.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Directory for gt.json, road.rpm, keypoint.rpm and gaps.json
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code. Data goes to `stdout`, diagnostics to `stderr`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    1
                }
            };
        }
    };
    let json = cli.json;
    match dispatch(cli) {
        Ok(out) => {
            if json {
                let _ = writeln!(stdout, "{}", serde_json::to_string(&out.report).expect("report serializes"));
            } else {
                let _ = write!(stdout, "{}", out.text);
            }
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

struct Outcome {
    report: RunReport,
    text: String,
}

struct Ctx {
    config_file: Option<PathBuf>,
    seed: u64,
    threads: Option<usize>,
}

impl Ctx {
    fn extraction(&self, flags: &ConfigFlags) -> Result<ExtractionConfig> {
        let mut cfg = match &self.config_file {
            Some(p) => read_json::<ExtractionConfig>(p)?,
            None => ExtractionConfig::default(),
        };
        let f = flags.clone();
        if let Some(v) = f.nms_radius {
            cfg.nms_radius = v;
        }
        if let Some(v) = f.mask_threshold {
            cfg.mask_threshold = v;
        }
        if let Some(v) = f.pair_radius {
            cfg.pair_radius = v;
        }
        if let Some(v) = f.k_max {
            cfg.k_max = v;
        }
        if let Some(v) = f.edge_threshold {
            cfg.edge_threshold = v;
        }
        if let Some(v) = f.keypoint_boost {
            cfg.keypoint_boost = v;
        }
        if let Some(v) = f.tau {
            cfg.tau = v;
        }
        if let Some(v) = f.samples {
            cfg.samples = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn report(&self, name: &str, args: &impl Serialize, extra: Value) -> RunReport {
        let mut config = json!({
            "args": args,
            "seed": self.seed,
            "threads": self.threads,
        });
        if let (Value::Object(c), Value::Object(e)) = (&mut config, extra) {
            c.extend(e);
        }
        RunReport::new(name, config)
    }
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    let ctx = Ctx {
        config_file: cli.config,
        seed: cli.seed,
        threads: cli.threads,
    };
    if let Command::Serve(a) = cli.command {
        return run_serve(&ctx, a);
    }
    let command = cli.command;
    with_threads(ctx.threads, move || match command {
        Command::Nms(a) => run_nms(&ctx, a),
        Command::BenchNms(a) => run_bench(&ctx, a),
        Command::Features(a) => run_features(&ctx, a),
        Command::TrainHead(a) => run_train(&ctx, a),
        Command::Score(a) => run_score(&ctx, a),
        Command::Extract(a) => run_extract(&ctx, a),
        Command::ExtractTiled(a) => run_tiled(&ctx, a),
        Command::Eval(a) => run_eval(&ctx, a),
        Command::Partition(a) => run_partition(&ctx, a),
        Command::SimulatePrompts(a) => run_prompts(&ctx, a),
        Command::Convert(a) => run_convert(&ctx, a),
        Command::Synth(a) => run_synth(&ctx, a),
        Command::Serve(_) => unreachable!("handled above"),
    })?
}

fn same_size(a: &Raster, b: &Raster, what: &str) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Usage(format!(
            "{what}: rasters differ in size ({}x{} vs {}x{})",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

fn run_nms(ctx: &Ctx, a: NmsArgs) -> Result<Outcome> {
    let cfg = ctx.extraction(&a.flags)?;
    let mut report = ctx.report("nms", &a, json!({ "extraction": cfg }));
    let t = Instant::now();
    let kp = read_raster(&a.keypoints)?;
    let road = read_raster(&a.road)?;
    same_size(&road, &kp, "nms")?;
    report.timings.push("read", t);
    let t = Instant::now();
    let mut cands = mask_to_candidates_with_boost(&kp, cfg.mask_threshold, Source::Keypoint, cfg.keypoint_boost)?;
    cands.extend(mask_to_candidates_with_boost(&road, cfg.mask_threshold, Source::Road, cfg.keypoint_boost)?);
    report.timings.push("candidates", t);
    let t = Instant::now();
    let vertices = unified_nms(&cands, cfg.nms_radius);
    report.timings.push("nms", t);
    write_vertices(&vertices, &a.out)?;
    report.outputs.push(a.out.display().to_string());
    let keypoints = vertices.iter().filter(|v| v.is_keypoint).count();
    report.result = json!({ "candidates": cands.len(), "vertices": vertices.len(), "keypoints": keypoints });
    let text = format!("{} vertices ({keypoints} keypoints) from {} candidates\n", vertices.len(), cands.len());
    Ok(Outcome { report, text })
}

fn run_bench(ctx: &Ctx, a: BenchArgs) -> Result<Outcome> {
    let mut report = ctx.report("bench-nms", &a, Value::Null);
    let t = Instant::now();
    let b = bench_nms(a.n, ctx.seed, a.radius)?;
    report.timings.push("bench", t);
    let text = format!(
        "n = {}: unified {:.1} ms ({} kept), three-pass {:.1} ms ({} kept)\n",
        b.n, b.unified_ms, b.unified_kept, b.legacy_ms, b.legacy_kept
    );
    report.result = serde_json::to_value(&b).expect("bench serializes");
    Ok(Outcome { report, text })
}

/// Output of `features`, input of `train-head --edges`.
#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureDoc {
    pub vertices: Vec<[f64; 2]>,
    pub radius: f64,
    pub edges: Vec<CandidateEdge>,
}

fn candidate_edges(road: &Raster, points: &[Point], cfg: &ExtractionConfig) -> Result<Vec<CandidateEdge>> {
    let pairs = pair_candidates(points, cfg.pair_radius, cfg.k_max);
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let pyramid = Pyramid::build(road, &cfg.pool_kernels)?;
    Ok(edge_features(&pyramid, points, &pairs, cfg)?)
}

fn run_features(ctx: &Ctx, a: FeaturesArgs) -> Result<Outcome> {
    let cfg = ctx.extraction(&a.flags)?;
    let mut report = ctx.report("features", &a, json!({ "extraction": cfg }));
    let t = Instant::now();
    let road = read_raster(&a.road)?;
    let points = vertex_points(&read_vertices(&a.vertices)?);
    report.timings.push("read", t);
    let t = Instant::now();
    let edges = candidate_edges(&road, &points, &cfg)?;
    report.timings.push("features", t);
    let doc = FeatureDoc {
        vertices: points.iter().map(|p| [p.x, p.y]).collect(),
        radius: cfg.pair_radius,
        edges,
    };
    write_json(&doc, &a.out)?;
    report.outputs.push(a.out.display().to_string());
    report.result = json!({ "vertices": doc.vertices.len(), "edges": doc.edges.len() });
    let text = format!("{} candidate edges among {} vertices\n", doc.edges.len(), doc.vertices.len());
    Ok(Outcome { report, text })
}

/// One batch holding every directed token of a feature file.
fn batch_from_features(doc: &FeatureDoc, labels: &[f64]) -> Result<TrainBatch> {
    if labels.len() != doc.edges.len() {
        return Err(Error::Usage(format!(
            "{} labels for {} edges",
            labels.len(),
            doc.edges.len()
        )));
    }
    if let Some(i) = labels.iter().position(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Usage(format!("label {i} is {}, expected 0 or 1", labels[i])));
    }
    let points: Vec<Point> = doc.vertices.iter().map(|&[x, y]| Point::new(x, y)).collect();
    let tokens = directed_tokens(&points, &doc.edges, doc.radius, None)?;
    Ok(TrainBatch {
        labels: tokens.edge_of.iter().map(|&k| labels[k]).collect(),
        features: tokens.features,
        groups: tokens.groups,
    })
}

fn run_train(ctx: &Ctx, a: TrainArgs) -> Result<Outcome> {
    // Without explicit settings, train for the synthetic scene defaults.
    let cfg = if ctx.config_file.is_some() || a.flags.any() {
        ctx.extraction(&a.flags)?
    } else {
        synthetic_extraction()
    };
    let mut recipe = SyntheticTraining::default();
    recipe.dataset.extraction = cfg.clone();
    let defaults = HeadShape::default();
    recipe.shape = HeadShape {
        input: cfg.feature_width(),
        hidden: a.hidden.unwrap_or(defaults.hidden),
        heads: a.heads.unwrap_or(defaults.heads),
        mlp_hidden: a.mlp_hidden.unwrap_or(defaults.mlp_hidden),
    };
    recipe.init_seed = ctx.seed;
    recipe.train = TrainConfig {
        epochs: a.epochs.unwrap_or(recipe.train.epochs),
        lr: a.lr.unwrap_or(recipe.train.lr),
        shuffle_seed: Some(ctx.seed),
        ..recipe.train
    };
    let t = Instant::now();
    let data = match (&a.edges, &a.labels, a.synthetic) {
        (Some(edges), Some(labels), None) => {
            let doc: FeatureDoc = read_json(edges)?;
            let labels: Vec<f64> = read_json(labels)?;
            let batch = batch_from_features(&doc, &labels)?;
            recipe.shape.input = batch.features.cols;
            vec![batch]
        }
        (None, None, Some(n)) => {
            recipe.scenes = n;
            recipe.template.seed = ctx.seed;
            make_edge_dataset(n, &recipe.template, &recipe.dataset)?
        }
        _ => {
            return Err(Error::Usage(
                "train-head needs either --edges with --labels, or --synthetic N".into(),
            ))
        }
    };
    report_dataset_nonempty(&data)?;
    let mut report = ctx.report("train-head", &a, json!({ "recipe": recipe }));
    report.timings.push("dataset", t);
    let t = Instant::now();
    let init = HeadWeights::init(recipe.shape, recipe.init_seed)?;
    let outcome = train(&init, &data, &recipe.train)?;
    report.timings.push("train", t);
    write_weights(&outcome.weights, &a.out)?;
    report.outputs.push(a.out.display().to_string());
    let tokens: usize = data.iter().map(TrainBatch::len).sum();
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    report.result = json!({ "batches": data.len(), "tokens": tokens, "losses": outcome.losses });
    let text = format!(
        "trained on {tokens} tokens in {} batches; final loss {last:.4}\n",
        data.len()
    );
    Ok(Outcome { report, text })
}

fn report_dataset_nonempty(data: &[TrainBatch]) -> Result<()> {
    if data.iter().all(TrainBatch::is_empty) {
        return Err(Error::Usage("training set has no edges".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct ScoredEdgeDoc {
    src: usize,
    dst: usize,
    score: f64,
}

fn run_score(ctx: &Ctx, a: ScoreArgs) -> Result<Outcome> {
    let cfg = ctx.extraction(&a.flags)?;
    let mut report = ctx.report("score", &a, json!({ "extraction": cfg }));
    let t = Instant::now();
    let w = read_weights(&a.weights)?;
    let road = read_raster(&a.road)?;
    let points = vertex_points(&read_vertices(&a.vertices)?);
    report.timings.push("read", t);
    if cfg.feature_width() != w.shape.input {
        return Err(Error::Usage(format!(
            "configuration yields {} features but the head expects {}",
            cfg.feature_width(),
            w.shape.input
        )));
    }
    let t = Instant::now();
    let edges = candidate_edges(&road, &points, &cfg)?;
    report.timings.push("features", t);
    let t = Instant::now();
    let scored = score_candidates(&w, &points, edges, cfg.pair_radius)?;
    report.timings.push("score", t);
    let docs: Vec<ScoredEdgeDoc> = scored
        .iter()
        .map(|e| ScoredEdgeDoc {
            src: e.src,
            dst: e.dst,
            score: e.score,
        })
        .collect();
    write_json(&docs, &a.out)?;
    report.outputs.push(a.out.display().to_string());
    let above = docs.iter().filter(|e| e.score >= cfg.edge_threshold).count();
    report.result = json!({ "edges": docs.len(), "above_threshold": above });
    let text = format!("scored {} edges, {above} at or above {}\n", docs.len(), cfg.edge_threshold);
    Ok(Outcome { report, text })
}

fn write_scored(graph: &RoadGraph, scores: Vec<f64>, with_scores: bool, path: &Path) -> Result<()> {
    if with_scores {
        write_json(&GraphDoc::with_scores(graph, scores), path)
    } else {
        write_graph(graph, path)
    }
}

fn graph_summary(g: &RoadGraph) -> Value {
    json!({ "vertices": g.vertices.len(), "edges": g.edges.len() })
}

fn run_extract(ctx: &Ctx, a: ExtractArgs) -> Result<Outcome> {
    let cfg = ctx.extraction(&a.flags)?;
    let mut report = ctx.report("extract", &a, json!({ "extraction": cfg }));
    let t = Instant::now();
    let road = read_raster(&a.road)?;
    let kp = read_raster(&a.keypoints)?;
    same_size(&road, &kp, "extract")?;
    let w = read_weights(&a.weights)?;
    report.timings.push("read", t);
    let t = Instant::now();
    let out = extract_graph_scored(&road, &kp, &w, &cfg)?;
    report.timings.push("extract", t);
    write_scored(&out.graph, out.scores, a.scores, &a.out)?;
    report.outputs.push(a.out.display().to_string());
    report.result = graph_summary(&out.graph);
    let text = format!("{} vertices, {} edges\n", out.graph.vertices.len(), out.graph.edges.len());
    Ok(Outcome { report, text })
}

fn run_tiled(ctx: &Ctx, a: TiledArgs) -> Result<Outcome> {
    let cfg = ctx.extraction(&a.flags)?;
    let [w, h, p, s] = a.layout[..] else {
        return Err(Error::Usage("--layout takes W H P S".into()));
    };
    let layout = PatchLayout::new(w, h, p, s)?;
    let mut report = ctx.report("extract-tiled", &a, json!({ "extraction": cfg, "layout": layout }));
    if !a.tiles.is_dir() {
        return Err(Error::io(
            &a.tiles,
            std::io::Error::new(std::io::ErrorKind::NotFound, "tile directory not found"),
        ));
    }
    let t = Instant::now();
    let weights = read_weights(&a.weights)?;
    let prompts = a.prompts.as_deref().map(read_prompts).transpose()?;
    report.timings.push("read", t);
    let coverage = match &prompts {
        Some(p) => Coverage::Prompts(p),
        None => Coverage::Full,
    };
    let provider = TilesProvider::new(&a.tiles);
    let mut timings = Timings::default();
    let out = extract_tiled_parallel(&provider, &layout, coverage, &weights, &cfg, &mut timings)?;
    report.timings.0.extend(timings.0);
    write_scored(&out.graph, out.scores, a.scores, &a.out)?;
    report.outputs.push(a.out.display().to_string());
    report.result = graph_summary(&out.graph);
    let text = format!("{} vertices, {} edges\n", out.graph.vertices.len(), out.graph.edges.len());
    Ok(Outcome { report, text })
}

/// Four decimals with trailing zeros trimmed, keeping one: `1.0`, `0.9333`.
fn fmt_metric(v: f64) -> String {
    let s = format!("{v:.4}");
    let t = s.trim_end_matches('0');
    if t.ends_with('.') {
        format!("{t}0")
    } else {
        t.to_string()
    }
}

fn run_eval(ctx: &Ctx, a: EvalArgs) -> Result<Outcome> {
    let d = MetricConfig::default();
    let mc = MetricConfig {
        snap_radius: a.snap_radius.unwrap_or(d.snap_radius),
        n_pairs: a.n_pairs.unwrap_or(d.n_pairs),
        match_radius: a.match_radius.unwrap_or(d.match_radius),
        interval: a.interval.unwrap_or(d.interval),
    };
    let mut report = ctx.report("eval", &a, json!({ "metrics": mc }));
    let t = Instant::now();
    let gt = read_graph(&a.gt)?;
    let prop = read_graph(&a.prop)?;
    report.timings.push("read", t);
    let (want_apls, want_topo) = if a.apls || a.topo { (a.apls, a.topo) } else { (true, true) };
    let mut result = json!({ "metric_config": mc });
    let mut text = String::new();
    if want_topo {
        let t = Instant::now();
        let r = topo(&gt, &prop, mc.match_radius, mc.interval)?;
        report.timings.push("topo", t);
        text += &format!(
            "precision = {}\nrecall = {}\nF1 = {}\n",
            fmt_metric(r.precision),
            fmt_metric(r.recall),
            fmt_metric(r.f1)
        );
        result["topo"] = serde_json::to_value(r).expect("topo serializes");
    }
    if want_apls {
        let t = Instant::now();
        let v = apls(&gt, &prop, &mc, ctx.seed)?;
        report.timings.push("apls", t);
        text += &format!("APLS = {}\n", fmt_metric(v));
        result["apls"] = json!(v);
    }
    if let Some(p) = &a.json_out {
        write_json(&result, p)?;
        report.outputs.push(p.display().to_string());
    }
    report.result = result;
    Ok(Outcome { report, text })
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a PartitionConfig,
    admitted: Vec<ManifestPatch>,
    candidates: &'a [trailgraph_core::dataset::PatchRecord],
}

#[derive(Serialize)]
struct ManifestPatch {
    origin: (usize, usize),
    density: f64,
    vertices: usize,
    edges: usize,
}

fn run_partition(ctx: &Ctx, a: PartitionArgs) -> Result<Outcome> {
    let d = PartitionConfig::default();
    let cfg = PartitionConfig {
        patch: a.patch.unwrap_or(d.patch),
        stride_base: a.stride_base.or(a.patch).unwrap_or(d.stride_base),
        stride_dense: a.stride_dense.unwrap_or(d.stride_dense),
        tau_density: a.tau_density.unwrap_or(d.tau_density),
        tau_sim: a.tau_sim.unwrap_or(d.tau_sim),
        ..d
    };
    let mut report = ctx.report("partition", &a, json!({ "partition": cfg }));
    let t = Instant::now();
    let graph = read_graph(&a.graph)?;
    report.timings.push("read", t);
    let t = Instant::now();
    let part = partition(&graph, a.width, a.height, &cfg)?;
    report.timings.push("partition", t);
    let manifest = Manifest {
        config: &cfg,
        admitted: part
            .samples
            .iter()
            .map(|s| ManifestPatch {
                origin: s.origin,
                density: s.density,
                vertices: s.graph.vertices.len(),
                edges: s.graph.edges.len(),
            })
            .collect(),
        candidates: &part.records,
    };
    write_json(&manifest, &a.manifest)?;
    report.outputs.push(a.manifest.display().to_string());
    let count = |f: fn(&Decision) -> bool| part.records.iter().filter(|r| f(&r.decision)).count();
    let low = count(|d| matches!(d, Decision::LowDensity));
    let similar = count(|d| matches!(d, Decision::TooSimilar { .. }));
    report.result = json!({ "admitted": part.samples.len(), "low_density": low, "too_similar": similar });
    let text = format!(
        "{} patches admitted; rejected {low} for density and {similar} for similarity\n",
        part.samples.len()
    );
    Ok(Outcome { report, text })
}

/// Smallest image holding every vertex.
fn graph_extent(g: &RoadGraph) -> (usize, usize) {
    let max = |f: fn(&trailgraph_core::Vertex) -> f64| g.vertices.iter().map(f).fold(0.0, f64::max);
    (max(|v| v.x).floor() as usize + 1, max(|v| v.y).floor() as usize + 1)
}

fn run_prompts(ctx: &Ctx, a: PromptArgs) -> Result<Outcome> {
    let d = PromptConfig::default();
    let cfg = PromptConfig {
        n_pos: a.n_pos.unwrap_or(d.n_pos),
        ratio: a.ratio.unwrap_or(d.ratio),
        dist_min: a.dist_min.unwrap_or(d.dist_min),
        ..d
    };
    let t = Instant::now();
    let graph = read_graph(&a.graph)?;
    let (ew, eh) = graph_extent(&graph);
    let (w, h) = (a.width.unwrap_or(ew), a.height.unwrap_or(eh));
    let mut report = ctx.report("simulate-prompts", &a, json!({ "prompts": cfg, "width": w, "height": h }));
    report.timings.push("read", t);
    let t = Instant::now();
    let prompts = simulate_prompts(&graph, w, h, &cfg, ctx.seed)?;
    report.timings.push("simulate", t);
    write_json(&prompts, &a.out)?;
    report.outputs.push(a.out.display().to_string());
    let pos = prompts.iter().filter(|p| p.polarity == trailgraph_core::Polarity::Positive).count();
    let neg = prompts.len() - pos;
    report.result = json!({ "positive": pos, "negative": neg });
    Ok(Outcome {
        report,
        text: format!("{pos} positive and {neg} negative prompts\n"),
    })
}

fn run_serve(ctx: &Ctx, a: ServeArgs) -> Result<Outcome> {
    let cfg = ctx.extraction(&a.flags)?;
    let addr = match &a.addr {
        Some(s) => s
            .parse()
            .map_err(|_| Error::Usage(format!("'{s}' is not a socket address")))?,
        None => addr_from_env()?,
    };
    let weights = weights_from_env(a.weights.as_deref())?;
    if cfg.feature_width() != weights.shape.input {
        return Err(Error::Usage(format!(
            "configuration yields {} features but the head expects {}",
            cfg.feature_width(),
            weights.shape.input
        )));
    }
    let app = Arc::new(AppState::new(weights, cfg.clone()));
    let run = || serve(addr, app);
    with_threads(ctx.threads, run)??;
    let report = ctx.report("serve", &a, json!({ "extraction": cfg }));
    Ok(Outcome {
        report,
        text: String::new(),
    })
}

fn extension(p: &Path) -> String {
    p.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

fn run_convert(ctx: &Ctx, a: ConvertArgs) -> Result<Outcome> {
    let mut report = ctx.report("convert", &a, Value::Null);
    let t = Instant::now();
    let (from, to) = (extension(&a.input), extension(&a.output));
    match (from.as_str(), to.as_str()) {
        ("json", "json") => write_graph(&read_graph(&a.input)?, &a.output)?,
        ("json", "csv") => {
            let g = read_graph(&a.input)?;
            write_text(&a.output, &graph_to_csv(&g))?;
        }
        ("rpm" | "pgm" | "csv", "rpm" | "pgm" | "csv") => {
            let r = match from.as_str() {
                "rpm" => read_raster(&a.input)?,
                "pgm" => pgm_to_raster(&read_bytes(&a.input)?).map_err(|e| e.at(&a.input))?,
                _ => csv_to_raster(&read_text(&a.input)?).map_err(|e| e.at(&a.input))?,
            };
            match to.as_str() {
                "rpm" => write_raster(&r, &a.output)?,
                "pgm" => write_bytes(&a.output, &raster_to_pgm(&r))?,
                _ => write_text(&a.output, &raster_to_csv(&r))?,
            }
        }
        _ => {
            return Err(Error::Usage(format!(
                "cannot convert .{from} to .{to}; graphs go json to json or csv, rasters between rpm, pgm and csv"
            )))
        }
    }
    report.timings.push("convert", t);
    report.outputs.push(a.output.display().to_string());
    let text = format!("wrote {}\n", a.output.display());
    Ok(Outcome { report, text })
}

fn read_bytes(p: &Path) -> Result<Vec<u8>> {
    std::fs::read(p).map_err(|e| Error::io(p, e))
}

fn write_bytes(p: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    write_bytes(p, text.as_bytes())
}

/// One row per edge: `x1,y1,x2,y2`.
pub fn graph_to_csv(g: &RoadGraph) -> String {
    let mut s = String::from("x1,y1,x2,y2\n");
    for &(i, j) in &g.edges {
        let (a, b) = (g.vertices[i], g.vertices[j]);
        s += &format!("{},{},{},{}\n", a.x, a.y, b.x, b.y);
    }
    s
}

pub fn raster_to_csv(r: &Raster) -> String {
    let mut s = String::new();
    for y in 0..r.height() {
        let row: Vec<String> = (0..r.width()).map(|x| r.get(x, y).to_string()).collect();
        s += &row.join(",");
        s.push('\n');
    }
    s
}

pub fn csv_to_raster(text: &str) -> Result<Raster> {
    let mut data = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(format!("line {}: {e}", n + 1)))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::format(format!("line {} has {} values, expected {w}", n + 1, row.len())))
            }
            _ => {}
        }
        data.extend(row);
        height += 1;
    }
    Ok(Raster::new(height, width.unwrap_or(0), data)?)
}

/// Binary 8-bit PGM; values are clamped to `[0, 1]` and scaled to 255.
pub fn raster_to_pgm(r: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", r.width(), r.height()).into_bytes();
    out.extend(r.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Binary PGM with `maxval` up to 65535, scaled to `[0, 1]`.
pub fn pgm_to_raster(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::format("only binary (P5) PGM is supported"));
    }
    let mut num = || -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::format("bad number in PGM header"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(format!("PGM maxval {maxval} out of range")));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    let n = w.checked_mul(h).ok_or_else(|| Error::format("PGM size overflows"))?;
    let bpp = if maxval < 256 { 1 } else { 2 };
    if body.len() != n * bpp {
        return Err(Error::format(format!("PGM body has {} bytes, expected {}", body.len(), n * bpp)));
    }
    let scale = maxval as f32;
    let data = if bpp == 1 {
        body.iter().map(|&b| f32::from(b) / scale).collect()
    } else {
        body.chunks_exact(2)
            .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) / scale)
            .collect()
    };
    Ok(Raster::new(h, w, data)?)
}

fn run_synth(ctx: &Ctx, a: SynthArgs) -> Result<Outcome> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    let seed_in_file = match &a.spec {
        Some(p) => read_json::<Value>(p)?.get("seed").is_some(),
        None => false,
    };
    if !seed_in_file {
        spec.seed = ctx.seed;
    }
    let mut report = ctx.report("synth", &a, json!({ "spec": spec }));
    let t = Instant::now();
    let scene = make_scene(&spec)?;
    report.timings.push("render", t);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let files = [
        ("gt.json", None),
        ("road.rpm", Some(&scene.road)),
        ("keypoint.rpm", Some(&scene.keypoint)),
    ];
    for (name, raster) in files {
        let p = a.out.join(name);
        match raster {
            Some(r) => write_raster(r, &p)?,
            None => write_graph(&scene.gt, &p)?,
        }
        report.outputs.push(p.display().to_string());
    }
    let gaps = a.out.join("gaps.json");
    write_json(&scene.gaps, &gaps)?;
    report.outputs.push(gaps.display().to_string());
    report.result = json!({
        "vertices": scene.gt.vertices.len(),
        "edges": scene.gt.edges.len(),
        "gaps": scene.gaps.len(),
    });
    let text = format!(
        "scene with {} vertices, {} edges and {} gaps in {}\n",
        scene.gt.vertices.len(),
        scene.gt.edges.len(),
        scene.gaps.len(),
        a.out.display()
    );
    Ok(Outcome { report, text })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_flag_prints_usage_and_exits_one() {
        let (code, _, err) = run_args(&["trailgraph", "eval", "--bogus"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn help_goes_to_stdout() {
        let (code, out, _) = run_args(&["trailgraph", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("extract-tiled"));
    }

    #[test]
    fn metric_formatting() {
        assert_eq!(fmt_metric(1.0), "1.0");
        assert_eq!(fmt_metric(0.0), "0.0");
        assert_eq!(fmt_metric(2.0 / 3.0), "0.6667");
        assert_eq!(fmt_metric(0.25), "0.25");
    }

    #[test]
    fn pgm_round_trip() {
        let r = Raster::from_fn(3, 2, |x, y| (x + 2 * y) as f32 / 5.0);
        let back = pgm_to_raster(&raster_to_pgm(&r)).unwrap();
        for (a, b) in r.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let with_comment = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        assert_eq!(pgm_to_raster(with_comment).unwrap().data(), &[0.0, 1.0]);
        assert!(pgm_to_raster(b"P2\n1 1\n255\n0").is_err());
        assert!(pgm_to_raster(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let r = Raster::from_fn(2, 3, |x, y| x as f32 * 0.5 + y as f32);
        assert_eq!(csv_to_raster(&raster_to_csv(&r)).unwrap(), r);
        assert!(csv_to_raster("1,2\n3\n").is_err());
        assert!(csv_to_raster("1,x\n").is_err());
    }
}
