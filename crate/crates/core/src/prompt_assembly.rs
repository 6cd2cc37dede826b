//! Interleaved text/slot prompt sequences for the three training stages and the referring query.
//!
//! Slots are abstract positions to be bound to projected vectors later; no tokenizer is involved.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi_align::RoiFeature;
use crate::slicing::{SpatialFeatures, TemporalFeatures};

pub const REGION: &str = "<region>";
const USER: &str = "User: ";
const ASSISTANT: &str = " Assistant:";
const ELLIPSIS: &str = "...";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Spatial,
    Temporal,
    SeedRegion,
    TrackRegion,
}

impl SlotKind {
    pub const ALL: [SlotKind; 4] = [SlotKind::Spatial, SlotKind::Temporal, SlotKind::SeedRegion, SlotKind::TrackRegion];

    pub fn name(self) -> &'static str {
        match self {
            SlotKind::Spatial => "spatial",
            SlotKind::Temporal => "temporal",
            SlotKind::SeedRegion => "seed_region",
            SlotKind::TrackRegion => "track_region",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Literal(String),
    Slot { kind: SlotKind, index: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSequence {
    segments: Vec<Segment>,
}

impl PromptSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Appends text, merging with a preceding literal. Empty text is dropped.
    pub fn push_literal(&mut self, text: &str) {
        if text.is_empty() {
            return;
        }
        if let Some(Segment::Literal(prev)) = self.segments.last_mut() {
            prev.push_str(text);
        } else {
            self.segments.push(Segment::Literal(text.to_string()));
        }
    }

    pub fn push_slot(&mut self, kind: SlotKind, index: usize) {
        self.segments.push(Segment::Slot { kind, index });
    }

    pub fn slot_count(&self, kind: SlotKind) -> usize {
        self.slots().filter(|(k, _)| *k == kind).count()
    }

    pub fn total_slots(&self) -> usize {
        self.slots().count()
    }

    pub fn slots(&self) -> impl Iterator<Item = (SlotKind, usize)> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot { kind, index } => Some((*kind, *index)),
            Segment::Literal(_) => None,
        })
    }

    /// Concatenated literal text with slots removed.
    pub fn literal_text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Literal(t) => Some(t.as_str()),
                Segment::Slot { .. } => None,
            })
            .collect()
    }

    /// Renders slots as `<slot:kind:index>` and literals verbatim.
    pub fn render_debug(&self) -> String {
        self.to_string()
    }

    /// Inverse of [`render_debug`](Self::render_debug).
    pub fn parse_debug(s: &str) -> Result<Self> {
        let mut out = PromptSequence::new();
        let mut rest = s;
        while let Some(start) = rest.find("<slot:") {
            let after = &rest[start + 6..];
            let parsed = after.find('>').and_then(|end| {
                let (kind, index) = after[..end].split_once(':')?;
                let kind = SlotKind::ALL.into_iter().find(|k| k.name() == kind)?;
                Some((kind, index.parse::<usize>().ok()?, end))
            });
            match parsed {
                Some((kind, index, end)) => {
                    out.push_literal(&rest[..start]);
                    out.push_slot(kind, index);
                    rest = &after[end + 1..];
                }
                None => {
                    out.push_literal(&rest[..start + 6]);
                    rest = after;
                }
            }
        }
        out.push_literal(rest);
        Ok(out)
    }
}

impl fmt::Display for PromptSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.segments {
            match s {
                Segment::Literal(t) => f.write_str(t)?,
                Segment::Slot { kind, index } => write!(f, "<slot:{}:{}>", kind.name(), index)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateLibrary {
    pub refer_instructions: Vec<String>,
    pub track_instructions: Vec<String>,
    pub stage1_instruction: String,
    pub stage2_instructions: Vec<String>,
}

impl Default for TemplateLibrary {
    fn default() -> Self {
        Self {
            refer_instructions: vec!["What is the <region> doing during this video?".into()],
            track_instructions: vec![
                "This is the tracking list: <region>, ..., <region>".into(),
                "This is the region's tracking list: <region> ... <region>".into(),
            ],
            stage1_instruction: "Write a terse but informative summary of the following video clip.".into(),
            stage2_instructions: vec![
                "Where is the person in the image?".into(),
                "What is the person doing in the video?".into(),
            ],
        }
    }
}

impl TemplateLibrary {
    pub fn validate(&self) -> Result<()> {
        if self.refer_instructions.is_empty() || self.track_instructions.is_empty() || self.stage2_instructions.is_empty() {
            return Err(Error::Empty("template library list"));
        }
        if self.stage1_instruction.is_empty() {
            return Err(Error::Empty("stage-1 instruction"));
        }
        for r in &self.refer_instructions {
            if r.matches(REGION).count() != 1 {
                return Err(Error::InvalidArgument(format!("refer instruction needs exactly one {REGION}: {r:?}")));
            }
        }
        for t in &self.track_instructions {
            if !t.contains(REGION) {
                return Err(Error::InvalidArgument(format!("track instruction has no {REGION}: {t:?}")));
            }
        }
        for s in std::iter::once(&self.stage1_instruction).chain(&self.stage2_instructions) {
            if s.contains(REGION) {
                return Err(Error::InvalidArgument(format!("stage instruction contains {REGION}: {s:?}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lib: Self = serde_json::from_str(text).map_err(|e| Error::json("template library", e))?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Video token geometry: a `grid_h x grid_w` spatial grid followed by `t_count` temporal tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoLayout {
    pub grid_h: usize,
    pub grid_w: usize,
    pub t_count: usize,
}

impl Default for VideoLayout {
    fn default() -> Self {
        use crate::feature_store::{DEFAULT_FRAMES, DEFAULT_GRID};
        Self { grid_h: DEFAULT_GRID, grid_w: DEFAULT_GRID, t_count: DEFAULT_FRAMES }
    }
}

impl VideoLayout {
    pub fn video_tokens(&self) -> usize {
        self.grid_h * self.grid_w + self.t_count
    }

    /// Layout of pooled features, checking their buffers and shared width.
    pub fn of(spatial: &SpatialFeatures, temporal: &TemporalFeatures) -> Result<Self> {
        if spatial.data.len() != spatial.grid_h * spatial.grid_w * spatial.dim {
            return Err(Error::ShapeMismatch("spatial buffer does not match its grid".into()));
        }
        if temporal.data.len() != temporal.t_count * temporal.dim {
            return Err(Error::ShapeMismatch("temporal buffer does not match its count".into()));
        }
        if spatial.dim != temporal.dim {
            return Err(Error::ShapeMismatch(format!(
                "spatial dim {} != temporal dim {}",
                spatial.dim, temporal.dim
            )));
        }
        Ok(Self { grid_h: spatial.grid_h, grid_w: spatial.grid_w, t_count: temporal.t_count })
    }

    fn check(&self, spatial: &SpatialFeatures, temporal: &TemporalFeatures) -> Result<()> {
        let actual = Self::of(spatial, temporal)?;
        if actual != *self {
            return Err(Error::ShapeMismatch(format!("features have layout {actual:?}, expected {self:?}")));
        }
        Ok(())
    }
}

fn video_prefix(layout: &VideoLayout) -> PromptSequence {
    let mut p = PromptSequence::new();
    p.push_literal(USER);
    for i in 0..layout.grid_h * layout.grid_w {
        p.push_slot(SlotKind::Spatial, i);
    }
    for i in 0..layout.t_count {
        p.push_slot(SlotKind::Temporal, i);
    }
    p
}

fn with_instruction(layout: &VideoLayout, instruction: &str) -> PromptSequence {
    let mut p = video_prefix(layout);
    p.push_literal(" ");
    p.push_literal(instruction);
    p.push_literal(ASSISTANT);
    p
}

pub fn stage1_prompt(layout: &VideoLayout, lib: &TemplateLibrary) -> Result<PromptSequence> {
    lib.validate()?;
    Ok(with_instruction(layout, &lib.stage1_instruction))
}

pub fn stage2_prompt(layout: &VideoLayout, lib: &TemplateLibrary, seed: u64) -> Result<PromptSequence> {
    lib.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i = rng.gen_range(0..lib.stage2_instructions.len());
    Ok(with_instruction(layout, &lib.stage2_instructions[i]))
}

/// Separator between expanded track slots, read off the template's placeholder run.
fn track_separator(template: &str) -> &str {
    let first = template.find(REGION).expect("validated") + REGION.len();
    let tail = &template[first..];
    match (tail.find(ELLIPSIS), tail.find(REGION)) {
        (Some(e), Some(r)) if e < r => &tail[..e],
        (_, Some(r)) => &tail[..r],
        _ => ", ",
    }
}

fn push_track_instruction(p: &mut PromptSequence, template: &str, m: usize) {
    let start = template.find(REGION).expect("validated");
    let end = template.rfind(REGION).expect("validated") + REGION.len();
    let sep = track_separator(template);
    p.push_literal(&template[..start]);
    for i in 0..m {
        if i > 0 {
            p.push_literal(sep);
        }
        p.push_slot(SlotKind::TrackRegion, i);
    }
    p.push_literal(&template[end..]);
}

/// Seeded `(refer, track)` template indices.
pub fn choose_refer_templates(lib: &TemplateLibrary, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(0..lib.refer_instructions.len());
    let t = rng.gen_range(0..lib.track_instructions.len());
    (r, t)
}

pub fn refer_prompt(layout: &VideoLayout, m: usize, lib: &TemplateLibrary, seed: u64) -> Result<PromptSequence> {
    lib.validate()?;
    if m == 0 {
        return Err(Error::Empty("track selection"));
    }
    let (ri, ti) = choose_refer_templates(lib, seed);
    let refer = &lib.refer_instructions[ri];
    let mut p = video_prefix(layout);
    p.push_literal(" ");
    let at = refer.find(REGION).expect("validated");
    p.push_literal(&refer[..at]);
    p.push_slot(SlotKind::SeedRegion, 0);
    p.push_literal(&refer[at + REGION.len()..]);
    p.push_literal(" ");
    push_track_instruction(&mut p, &lib.track_instructions[ti], m);
    p.push_literal(ASSISTANT);
    Ok(p)
}

pub fn assemble_stage1(
    spatial: &SpatialFeatures,
    temporal: &TemporalFeatures,
    layout: &VideoLayout,
    lib: &TemplateLibrary,
) -> Result<PromptSequence> {
    layout.check(spatial, temporal)?;
    stage1_prompt(layout, lib)
}

pub fn assemble_stage2(
    spatial: &SpatialFeatures,
    temporal: &TemporalFeatures,
    layout: &VideoLayout,
    lib: &TemplateLibrary,
    seed: u64,
) -> Result<PromptSequence> {
    layout.check(spatial, temporal)?;
    stage2_prompt(layout, lib, seed)
}

/// Referring prompt; `selected` must be in frame order and every RoI must share one width.
pub fn assemble_refer(
    spatial: &SpatialFeatures,
    temporal: &TemporalFeatures,
    seed_roi: &RoiFeature,
    selected: &[RoiFeature],
    lib: &TemplateLibrary,
    seed: u64,
) -> Result<PromptSequence> {
    let layout = VideoLayout::of(spatial, temporal)?;
    if selected.is_empty() {
        return Err(Error::Empty("track selection"));
    }
    let width = seed_roi.vector.len();
    if let Some(r) = selected.iter().find(|r| r.vector.len() != width) {
        return Err(Error::ShapeMismatch(format!("RoI width {} != seed width {width}", r.vector.len())));
    }
    for w in selected.windows(2) {
        if w[0].source.t >= w[1].source.t {
            return Err(Error::UnorderedTrack { prev: w[0].source.t, next: w[1].source.t });
        }
    }
    refer_prompt(&layout, selected.len(), lib, seed)
}
