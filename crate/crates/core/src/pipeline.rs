//! End-to-end composition: track, sample, align, select, pool, assemble, analyze.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diversity_analysis::{analyze, DiversityReport, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::feature_store::{write_tensor, FrameFeatureSequence, DEFAULT_FRAMES, DEFAULT_RESOLUTION, DEFAULT_STRIDE};
use crate::geometry::{rescale_box, TrackedBox, TrackingList};
use crate::jsonl::{write_json, write_jsonl};
use crate::prompt_assembly::{assemble_refer, PromptSequence, TemplateLibrary, VideoLayout};
use crate::roi_align::{align_track, roi_align, rois_to_tensor, RoiAlignConfig, RoiFeature};
use crate::roi_selection::{select_rois, selection_report, MethodDiversity, SelectionConfig, DEFAULT_INPUT_BOXES};
use crate::slicing::{spatial_pool, temporal_pool, SpatialFeatures, TemporalFeatures};
use crate::tracking::{sample_track, track, TrackConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Load,
    Track,
    Sample,
    Roialign,
    Select,
    Pool,
    Prompt,
    Analyze,
    Write,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Track => "track",
            Stage::Sample => "sample",
            Stage::Roialign => "roialign",
            Stage::Select => "select",
            Stage::Pool => "pool",
            Stage::Prompt => "prompt",
            Stage::Analyze => "analyze",
            Stage::Write => "write",
        }
    }
}

/// A component error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage.name(), self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxUnits {
    /// Feature-grid cells.
    #[default]
    Grid,
    /// Pixels of the `resolution x resolution` encoder input.
    Pixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    pub resolution: usize,
    pub stride: usize,
    pub frames: usize,
    /// Reject feature files whose shape differs from `resolution / stride` and `frames`.
    pub enforce: bool,
    pub box_units: BoxUnits,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            stride: DEFAULT_STRIDE,
            frames: DEFAULT_FRAMES,
            enforce: false,
            box_units: BoxUnits::Grid,
        }
    }
}

impl Geometry {
    pub fn grid(&self) -> usize {
        self.resolution / self.stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.resolution == 0 || self.resolution % self.stride != 0 || self.frames == 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {} must be a positive multiple of stride {}, frames {} >= 1",
                self.resolution, self.stride, self.frames
            )));
        }
        Ok(())
    }

    pub fn check(&self, seq: &FrameFeatureSequence) -> Result<()> {
        let g = self.grid();
        if self.enforce && (seq.grid_h() != g || seq.grid_w() != g || seq.t_count() != self.frames) {
            return Err(Error::ShapeMismatch(format!(
                "features are {}x{}x{}, configuration expects {}x{g}x{g}",
                seq.t_count(),
                seq.grid_h(),
                seq.grid_w(),
                self.frames
            )));
        }
        Ok(())
    }

    /// Factor from the configured box units to grid cells.
    pub fn to_grid(&self) -> f64 {
        match self.box_units {
            BoxUnits::Grid => 1.0,
            BoxUnits::Pixels => 1.0 / self.stride as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub geometry: Geometry,
    pub tracker: TrackConfig,
    pub roi: RoiAlignConfig,
    /// Boxes sampled from the tracking list before selection.
    pub track_samples: usize,
    pub selection: SelectionConfig,
    pub bins: usize,
    pub prompt_seed: u64,
    pub templates: Option<PathBuf>,
    pub keep_intermediates: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::default(),
            tracker: TrackConfig::default(),
            roi: RoiAlignConfig::default(),
            track_samples: DEFAULT_INPUT_BOXES,
            selection: SelectionConfig::default(),
            bins: DEFAULT_BINS,
            prompt_seed: 0,
            templates: None,
            keep_intermediates: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.tracker.validate()?;
        self.roi.validate()?;
        self.selection.validate()?;
        if self.track_samples == 0 || self.bins < 2 {
            return Err(Error::InvalidArgument("track_samples must be >= 1 and bins >= 2".into()));
        }
        Ok(())
    }

    pub fn library(&self) -> Result<TemplateLibrary> {
        match &self.templates {
            Some(p) => TemplateLibrary::read(p),
            None => Ok(TemplateLibrary::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub prompt: PromptSequence,
    pub track: TrackingList,
    pub sampled: TrackingList,
    pub rois: Vec<RoiFeature>,
    pub seed_roi: RoiFeature,
    pub selected: Vec<RoiFeature>,
    pub selection_truncated: bool,
    pub spatial: SpatialFeatures,
    pub temporal: TemporalFeatures,
    pub report: DiversityReport,
    pub methods: Vec<MethodDiversity>,
}

fn vectors(rois: &[RoiFeature]) -> Vec<Vec<f64>> {
    rois.iter().map(|r| r.vector.iter().map(|&v| v as f64).collect()).collect()
}

/// Runs every stage on one video. `seed` is in the configured box units.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    features: &FrameFeatureSequence,
    seed: TrackedBox,
) -> std::result::Result<Bundle, StageError> {
    cfg.validate().at(Stage::Config)?;
    let lib = cfg.library().at(Stage::Config)?;
    cfg.geometry.check(features).at(Stage::Load)?;
    let k = cfg.geometry.to_grid();
    let seed = TrackedBox::new(seed.t, rescale_box(&seed.bbox, k, k).at(Stage::Track)?);

    let tracker = TrackConfig { roi: cfg.roi, ..cfg.tracker };
    let full = track(features, seed, &tracker).at(Stage::Track)?;
    let sampled = sample_track(&full, cfg.track_samples).at(Stage::Sample)?;
    let rois = align_track(features, sampled.entries(), &cfg.roi).at(Stage::Roialign)?;
    let seed_roi = roi_align(&features.slice_frame(seed.t).at(Stage::Roialign)?, seed, &cfg.roi).at(Stage::Roialign)?;
    let selection = select_rois(&rois, &cfg.selection).at(Stage::Select)?;
    let methods = selection_report(&rois, &cfg.selection).at(Stage::Select)?;
    let spatial = spatial_pool(features).at(Stage::Pool)?;
    let temporal = temporal_pool(features).at(Stage::Pool)?;
    let prompt = assemble_refer(&spatial, &temporal, &seed_roi, &selection.rois, &lib, cfg.prompt_seed).at(Stage::Prompt)?;
    let report = analyze(&vectors(&selection.rois), cfg.bins).at(Stage::Analyze)?;
    Ok(Bundle {
        prompt,
        track: full,
        sampled,
        rois,
        seed_roi,
        selected: selection.rois,
        selection_truncated: selection.truncated,
        spatial,
        temporal,
        report,
        methods,
    })
}

#[derive(Serialize)]
struct Summary<'a> {
    layout: VideoLayout,
    slots: usize,
    track_len: usize,
    sampled_frames: Vec<usize>,
    selected_frames: Vec<usize>,
    selection_truncated: bool,
    report: &'a DiversityReport,
}

/// Writes the bundle into `dir`: `prompt.txt`, `prompt.json`, `selected.jsonl`,
/// `selected_rois.artf`, `report.json`, `summary.json` and `selection_report.csv`, plus the
/// track, sampled boxes, all RoIs, seed RoI and pooled features when `keep_intermediates`.
pub fn write_bundle(bundle: &Bundle, dir: impl AsRef<Path>, keep_intermediates: bool) -> std::result::Result<(), StageError> {
    let dir = dir.as_ref();
    let w = |r: Result<()>| r.at(Stage::Write);
    w(std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)))?;
    let mut text = bundle.prompt.render_debug();
    text.push('\n');
    w(std::fs::write(dir.join("prompt.txt"), text).map_err(|e| Error::io(dir.join("prompt.txt"), e)))?;
    w(write_json(dir.join("prompt.json"), &bundle.prompt))?;
    let selected: Vec<TrackedBox> = bundle.selected.iter().map(|r| r.source).collect();
    w(write_jsonl(dir.join("selected.jsonl"), &selected))?;
    w(rois_to_tensor(&bundle.selected).and_then(|t| write_tensor(&t, dir.join("selected_rois.artf"))))?;
    w(write_json(dir.join("report.json"), &bundle.report))?;
    let summary = Summary {
        layout: VideoLayout::of(&bundle.spatial, &bundle.temporal).at(Stage::Write)?,
        slots: bundle.prompt.total_slots(),
        track_len: bundle.track.len(),
        sampled_frames: bundle.sampled.frames().collect(),
        selected_frames: selected.iter().map(|b| b.t).collect(),
        selection_truncated: bundle.selection_truncated,
        report: &bundle.report,
    };
    w(write_json(dir.join("summary.json"), &summary))?;
    w(write_diversity_csv(dir.join("selection_report.csv"), &bundle.methods))?;
    if keep_intermediates {
        w(bundle.track.write_jsonl(dir.join("track.jsonl")))?;
        w(bundle.sampled.write_jsonl(dir.join("sampled.jsonl")))?;
        w(rois_to_tensor(&bundle.rois).and_then(|t| write_tensor(&t, dir.join("rois.artf"))))?;
        w(rois_to_tensor(std::slice::from_ref(&bundle.seed_roi)).and_then(|t| write_tensor(&t, dir.join("seed_roi.artf"))))?;
        w(write_tensor(&bundle.spatial.to_tensor(), dir.join("spatial.artf")))?;
        w(write_tensor(&bundle.temporal.to_tensor(), dir.join("temporal.artf")))?;
    }
    Ok(())
}

pub const CSV_COLUMNS: [&str; 6] = [
    "method",
    "n_selected",
    "n_rois",
    "entropy_bits",
    "consecutive_diversity",
    "pairwise_diversity",
];

/// One CSV row per method, columns as in [`CSV_COLUMNS`].
pub fn diversity_csv(rows: &[MethodDiversity]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.n_selected.to_string(),
            r.report.n_rois.to_string(),
            r.report.entropy_bits.to_string(),
            r.report.consecutive_diversity.to_string(),
            r.report.pairwise_diversity.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_diversity_csv(path: impl AsRef<Path>, rows: &[MethodDiversity]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, diversity_csv(rows)?).map_err(|e| Error::io(path, e))
}
