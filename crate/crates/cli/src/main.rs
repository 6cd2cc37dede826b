use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use refpipe::caption_metrics::{evaluate, read_corpus, CaptionRecord, MetricsConfig};
use refpipe::curation::{curate, AdapterSpec};
use refpipe::diversity_analysis::{analyze_with, Distance};
use refpipe::feature_store::{read_tensor, write_tensor, FrameFeatureSequence};
use refpipe::geometry::{TrackedBox, TrackingList};
use refpipe::jsonl::{read_jsonl, write_json, write_jsonl};
use refpipe::pipeline::{run_pipeline, write_bundle, write_diversity_csv, PipelineConfig};
use refpipe::prompt_assembly::{refer_prompt, stage1_prompt, stage2_prompt, TemplateLibrary, VideoLayout};
use refpipe::roi_align::{align_track, rois_from_tensor, rois_to_tensor};
use refpipe::roi_selection::{select_rois, selection_report, Representative, SelectionMethod};
use refpipe::slicing::{spatial_pool, temporal_pool};
use refpipe::tracking::{reconcile, track, AnnotationSet, DEFAULT_TAU};

#[derive(Parser)]
#[command(name = "refpipe", version, about = "Target-specific video features, RoI selection, prompts, curation and caption metrics")]
struct Cli {
    /// Pipeline configuration (TOML, or JSON by extension). Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Follow a seed box through a feature video.
    Track(TrackArgs),
    /// Merge two tracking lists against sparse annotations.
    Reconcile(ReconcileArgs),
    /// Spatial and temporal average pooling.
    Pool(PoolArgs),
    /// RoI vectors for a list of boxes.
    Roialign(RoiAlignArgs),
    /// Pick representative RoIs.
    Select(SelectArgs),
    /// Emit a prompt sequence.
    Prompt(PromptArgs),
    /// Entropy and inter-frame diversity of a RoI set.
    Analyze(AnalyzeArgs),
    /// Caption metrics over predictions and references.
    Evaluate(EvaluateArgs),
    /// Build QA pairs from source annotations.
    Curate(CurateArgs),
    /// The whole pipeline for one video, or a batch of videos.
    Run(RunArgs),
}

#[derive(Args)]
struct TrackerFlags {
    #[arg(long)]
    search_radius: Option<f64>,
    #[arg(long)]
    min_similarity: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
}

#[derive(Args)]
struct RoiFlags {
    /// Output bins per side.
    #[arg(long)]
    grid_size: Option<usize>,
    /// Samples per bin per axis.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    features: PathBuf,
    /// Seed box as "t,x1,y1,x2,y2" in grid cells.
    #[arg(long)]
    seed: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tracker: TrackerFlags,
    #[command(flatten)]
    roi: RoiFlags,
}

#[derive(Args)]
struct ReconcileArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out_spatial: PathBuf,
    #[arg(long)]
    out_temporal: PathBuf,
}

#[derive(Args)]
struct RoiAlignArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    boxes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    roi: RoiFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Clustering,
    Uniform,
    Random,
    None,
}

impl From<MethodArg> for SelectionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Clustering => SelectionMethod::Clustering,
            MethodArg::Uniform => SelectionMethod::Uniform,
            MethodArg::Random => SelectionMethod::Random,
            MethodArg::None => SelectionMethod::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RepresentativeArg {
    Medoid,
    RandomMember,
}

#[derive(Args)]
struct SelectionFlags {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Seed for k-means and random selection.
    #[arg(long = "selection-seed")]
    selection_seed: Option<u64>,
    #[arg(long, value_enum)]
    representative: Option<RepresentativeArg>,
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Args)]
struct SelectArgs {
    /// `[N, D]` RoI tensor.
    #[arg(long)]
    rois: PathBuf,
    /// The N boxes the RoIs came from, in row order.
    #[arg(long)]
    track: PathBuf,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    representative: Option<RepresentativeArg>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Selected boxes as JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Selected RoI vectors as an `[M, D]` tensor.
    #[arg(long)]
    out_rois: Option<PathBuf>,
    /// Per-method diversity comparison as CSV.
    #[arg(long)]
    report_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Stage1,
    Stage2,
    Refer,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptFormat {
    Debug,
    Json,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long, value_enum, default_value = "refer")]
    stage: StageArg,
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    grid_h: Option<usize>,
    #[arg(long)]
    grid_w: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_enum, default_value = "debug")]
    format: PromptFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    Cosine,
    L2,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    rois: PathBuf,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long, value_enum, default_value = "cosine")]
    distance: DistanceArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions: JSONL of {id, hypothesis}.
    #[arg(long, requires = "refs", conflicts_with = "corpus")]
    pred: Option<PathBuf>,
    /// References: JSONL of {id, references}.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// A single JSONL of {id, references, hypothesis}.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Replace zero BLEU n-gram matches with this count.
    #[arg(long)]
    bleu_epsilon: Option<f64>,
    #[arg(long)]
    cider_d: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurateArgs {
    /// Source annotations, JSONL or a JSON array.
    #[arg(long)]
    src: PathBuf,
    /// Preset name or adapter JSON file.
    #[arg(long)]
    adapter: String,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// External tracking lists: JSONL of {video_id, track: [{t, box}]}.
    #[arg(long)]
    tracks: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, required_unless_present = "batch", requires = "seed")]
    features: Option<PathBuf>,
    /// Seed box as "t,x1,y1,x2,y2" in the configured box units.
    #[arg(long)]
    seed: Option<String>,
    /// JSONL of {id, features, seed}; each video is written to `<out>/<id>`.
    #[arg(long, conflicts_with_all = ["features", "seed"])]
    batch: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    prompt_seed: Option<u64>,
    #[arg(long)]
    track_samples: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    keep_intermediates: bool,
    #[command(flatten)]
    selection: SelectionFlags,
    #[command(flatten)]
    tracker: TrackerFlags,
    #[command(flatten)]
    roi: RoiFlags,
}

/// Prefixes an error with its stage label.
fn at<T>(stage: &str, r: refpipe::Result<T>) -> Result<T> {
    r.map_err(|e| anyhow!("[{stage}] {e}"))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("[config] cannot read {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let cfg: PipelineConfig = if is_json {
        serde_json::from_str(&text).with_context(|| format!("[config] {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("[config] {}", path.display()))?
    };
    Ok(cfg)
}

fn apply_tracker(cfg: &mut PipelineConfig, f: &TrackerFlags) {
    if let Some(v) = f.search_radius {
        cfg.tracker.search_radius = v;
    }
    if let Some(v) = f.min_similarity {
        cfg.tracker.min_similarity = v;
    }
    if let Some(v) = f.step {
        cfg.tracker.step = v;
    }
}

fn apply_roi(cfg: &mut PipelineConfig, f: &RoiFlags) {
    if let Some(v) = f.grid_size {
        cfg.roi.grid_size = v;
    }
    if let Some(v) = f.samples {
        cfg.roi.samples_per_bin = v;
    }
}

fn apply_selection(
    cfg: &mut PipelineConfig,
    m: Option<usize>,
    method: Option<MethodArg>,
    seed: Option<u64>,
    rep: Option<RepresentativeArg>,
    restarts: Option<usize>,
) {
    let s = &mut cfg.selection;
    if let Some(v) = m {
        s.m = v;
    }
    if let Some(v) = method {
        s.method = v.into();
    }
    if let Some(v) = seed {
        s.seed = v;
    }
    if let Some(v) = rep {
        s.representative = match v {
            RepresentativeArg::Medoid => Representative::Medoid,
            RepresentativeArg::RandomMember => Representative::RandomMember,
        };
    }
    if let Some(v) = restarts {
        s.restarts = v;
    }
}

fn load_features(path: &Path) -> Result<FrameFeatureSequence> {
    at("load", FrameFeatureSequence::read(path))
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => at("write", write_json(p, value)),
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, value)?;
            writeln!(stdout)?;
            Ok(())
        }
    }
}

fn emit_list(list: &TrackingList, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => at("write", list.write_jsonl(p)),
        None => {
            let mut stdout = std::io::stdout().lock();
            for e in list {
                serde_json::to_writer(&mut stdout, e)?;
                writeln!(stdout)?;
            }
            Ok(())
        }
    }
}

fn cmd_track(cfg: PipelineConfig, a: TrackArgs) -> Result<()> {
    let mut cfg = cfg;
    apply_tracker(&mut cfg, &a.tracker);
    apply_roi(&mut cfg, &a.roi);
    let seq = load_features(&a.features)?;
    let seed: TrackedBox = at("config", a.seed.parse())?;
    let tracker = refpipe::tracking::TrackConfig { roi: cfg.roi, ..cfg.tracker };
    let list = at("track", track(&seq, seed, &tracker))?;
    emit_list(&list, a.out.as_deref())
}

fn cmd_reconcile(a: ReconcileArgs) -> Result<()> {
    let la = at("load", TrackingList::read_jsonl(&a.a))?;
    let lb = at("load", TrackingList::read_jsonl(&a.b))?;
    let gt = at("load", AnnotationSet::read_jsonl(&a.gt))?;
    let merged = at("reconcile", reconcile(&la, &lb, &gt, a.tau))?;
    emit_list(&merged, a.out.as_deref())
}

fn cmd_pool(a: PoolArgs) -> Result<()> {
    let seq = load_features(&a.features)?;
    let s = at("pool", spatial_pool(&seq))?;
    let t = at("pool", temporal_pool(&seq))?;
    at("write", write_tensor(&s.to_tensor(), &a.out_spatial))?;
    at("write", write_tensor(&t.to_tensor(), &a.out_temporal))
}

fn cmd_roialign(cfg: PipelineConfig, a: RoiAlignArgs) -> Result<()> {
    let mut cfg = cfg;
    apply_roi(&mut cfg, &a.roi);
    let seq = load_features(&a.features)?;
    let boxes: Vec<TrackedBox> = at("load", read_jsonl(&a.boxes))?;
    let rois = at("roialign", align_track(&seq, &boxes, &cfg.roi))?;
    at("write", rois_to_tensor(&rois).and_then(|t| write_tensor(&t, &a.out)))
}

fn cmd_select(cfg: PipelineConfig, a: SelectArgs) -> Result<()> {
    let mut cfg = cfg;
    apply_selection(&mut cfg, a.m, a.method, a.seed, a.representative, a.restarts);
    let tensor = at("load", read_tensor(&a.rois))?;
    let boxes: Vec<TrackedBox> = at("load", read_jsonl(&a.track))?;
    let rois = at("load", rois_from_tensor(&tensor, &boxes))?;
    let sel = at("select", select_rois(&rois, &cfg.selection))?;
    if sel.truncated {
        eprintln!("[select] only {} RoIs available, fewer than m = {}", rois.len(), cfg.selection.m);
    }
    let chosen: Vec<TrackedBox> = sel.rois.iter().map(|r| r.source).collect();
    match &a.out {
        Some(p) => at("write", write_jsonl(p, &chosen))?,
        None => emit_list(&at("select", TrackingList::new(chosen))?, None)?,
    }
    if let Some(p) = &a.out_rois {
        at("write", rois_to_tensor(&sel.rois).and_then(|t| write_tensor(&t, p)))?;
    }
    if let Some(p) = &a.report_csv {
        let rows = at("analyze", selection_report(&rois, &cfg.selection))?;
        at("write", write_diversity_csv(p, &rows))?;
    }
    Ok(())
}

fn cmd_prompt(cfg: PipelineConfig, a: PromptArgs) -> Result<()> {
    let lib = match a.templates.as_ref().or(cfg.templates.as_ref()) {
        Some(p) => at("config", TemplateLibrary::read(p))?,
        None => TemplateLibrary::default(),
    };
    let grid = cfg.geometry.grid();
    let layout = VideoLayout {
        grid_h: a.grid_h.unwrap_or(grid),
        grid_w: a.grid_w.unwrap_or(grid),
        t_count: a.frames.unwrap_or(cfg.geometry.frames),
    };
    let p = at(
        "prompt",
        match a.stage {
            StageArg::Stage1 => stage1_prompt(&layout, &lib),
            StageArg::Stage2 => stage2_prompt(&layout, &lib, a.seed),
            StageArg::Refer => refer_prompt(&layout, a.m, &lib, a.seed),
        },
    )?;
    match a.format {
        PromptFormat::Json => emit_json(&p, a.out.as_deref()),
        PromptFormat::Debug => {
            let text = format!("{}\n", p.render_debug());
            match &a.out {
                Some(path) => std::fs::write(path, text).with_context(|| format!("[write] {}", path.display())),
                None => Ok(std::io::stdout().lock().write_all(text.as_bytes())?),
            }
        }
    }
}

fn cmd_analyze(cfg: PipelineConfig, a: AnalyzeArgs) -> Result<()> {
    let t = at("load", read_tensor(&a.rois))?;
    let [n, d] = t.dims[..] else {
        return Err(anyhow!("[load] RoI tensor must be rank 2 [N, D], got {:?}", t.dims));
    };
    let vectors: Vec<Vec<f64>> = (0..n).map(|i| t.data[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect()).collect();
    let distance = match a.distance {
        DistanceArg::Cosine => Distance::Cosine,
        DistanceArg::L2 => Distance::L2,
    };
    let report = at("analyze", analyze_with(&vectors, a.bins.unwrap_or(cfg.bins), distance))?;
    emit_json(&report, a.out.as_deref())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let corpus: Vec<CaptionRecord> = match (&a.pred, &a.refs, &a.corpus) {
        (Some(p), Some(r), None) => at("load", read_corpus(p, r))?,
        (None, None, Some(c)) => at("load", read_jsonl(c))?,
        _ => return Err(anyhow!("[config] give either --pred with --refs, or --corpus")),
    };
    let cfg = MetricsConfig { bleu_epsilon: a.bleu_epsilon, cider_d: a.cider_d };
    let report = at("evaluate", evaluate(&corpus, &cfg))?;
    emit_json(&report, a.out.as_deref())
}

#[derive(serde::Deserialize)]
struct ExternalTrack {
    video_id: String,
    track: TrackingList,
}

fn read_sources(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("[load] cannot read {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("[load] {}", path.display()));
    }
    at("load", refpipe::jsonl::parse_jsonl(text.as_bytes(), &path.display().to_string()))
}

fn cmd_curate(cfg: PipelineConfig, a: CurateArgs) -> Result<()> {
    let adapter = at("config", AdapterSpec::resolve(&a.adapter))?;
    let lib = match a.templates.as_ref().or(cfg.templates.as_ref()) {
        Some(p) => at("config", TemplateLibrary::read(p))?,
        None => TemplateLibrary::default(),
    };
    let records = read_sources(&a.src)?;
    let mut tracks = BTreeMap::new();
    if let Some(p) = &a.tracks {
        for t in at("load", read_jsonl::<ExternalTrack>(p))? {
            tracks.insert(t.video_id, t.track);
        }
    }
    let (pairs, stats) = at("curate", curate(&records, &adapter, &lib, a.seed, &tracks, a.tau))?;
    at("write", refpipe::curation::export_dataset(&pairs, &a.out))?;
    eprintln!(
        "[curate] {} sources, {} clips, {} pairs, {} clips without annotations",
        stats.sources, stats.clips, stats.pairs, stats.skipped_clips
    );
    Ok(())
}

#[derive(serde::Deserialize)]
struct BatchItem {
    id: String,
    features: PathBuf,
    seed: String,
}

fn run_one(cfg: &PipelineConfig, features: &Path, seed: &str, out: &Path) -> Result<()> {
    let seq = load_features(features)?;
    let seed: TrackedBox = at("config", seed.parse())?;
    let bundle = run_pipeline(cfg, &seq, seed).map_err(|e| anyhow!("{e}"))?;
    write_bundle(&bundle, out, cfg.keep_intermediates).map_err(|e| anyhow!("{e}"))
}

fn cmd_run(cfg: PipelineConfig, a: RunArgs) -> Result<()> {
    let mut cfg = cfg;
    apply_tracker(&mut cfg, &a.tracker);
    apply_roi(&mut cfg, &a.roi);
    let s = &a.selection;
    apply_selection(&mut cfg, s.m, s.method, s.selection_seed, s.representative, s.restarts);
    if let Some(t) = &a.templates {
        cfg.templates = Some(t.clone());
    }
    if let Some(v) = a.prompt_seed {
        cfg.prompt_seed = v;
    }
    if let Some(v) = a.track_samples {
        cfg.track_samples = v;
    }
    if let Some(v) = a.bins {
        cfg.bins = v;
    }
    cfg.keep_intermediates |= a.keep_intermediates;
    at("config", cfg.validate())?;

    match (&a.batch, &a.features, &a.seed) {
        (Some(batch), _, _) => {
            let items: Vec<BatchItem> = at("load", read_jsonl(batch))?;
            let results: Vec<(String, Result<()>)> = items
                .par_iter()
                .map(|it| (it.id.clone(), run_one(&cfg, &it.features, &it.seed, &a.out.join(&it.id))))
                .collect();
            let mut failed = 0;
            for (id, r) in results {
                if let Err(e) = r {
                    eprintln!("{id}: {e:#}");
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(anyhow!("[run] {failed} of {} videos failed", items.len()));
            }
            Ok(())
        }
        (None, Some(f), Some(seed)) => run_one(&cfg, f, seed, &a.out),
        _ => Err(anyhow!("[config] give --features with --seed, or --batch")),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("REFPIPE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow!("[config] REFPIPE_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            return Err(anyhow!("[config] REFPIPE_THREADS must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Track(a) => cmd_track(cfg, a),
        Command::Reconcile(a) => cmd_reconcile(a),
        Command::Pool(a) => cmd_pool(a),
        Command::Roialign(a) => cmd_roialign(cfg, a),
        Command::Select(a) => cmd_select(cfg, a),
        Command::Prompt(a) => cmd_prompt(cfg, a),
        Command::Analyze(a) => cmd_analyze(cfg, a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Curate(a) => cmd_curate(cfg, a),
        Command::Run(a) => cmd_run(cfg, a),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
