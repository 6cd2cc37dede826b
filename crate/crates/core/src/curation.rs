//! Turns heterogeneous source annotations into referring QA pairs with tracking lists.
//!
//! Each source dataset is described by an [`AdapterSpec`]: a declarative mapping from its JSON
//! field names and box convention onto [`SourceAnnotation`], plus a clip strategy.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::feature_store::FrameFeatureSequence;
use crate::geometry::{rescale_box, BBox, TrackedBox, TrackingList};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::prompt_assembly::{choose_refer_templates, TemplateLibrary};
use crate::tracking::{reconcile, retrack_dual, AnnotationSet, TrackConfig};

/// Caption attached to a time span of the video, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedCaption {
    pub start: f64,
    pub end: f64,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionTriple {
    pub category: String,
    #[serde(default)]
    pub adverb: String,
    pub action: String,
}

/// Binary mask as explicit `(x, y)` cells or as uncompressed column-major run lengths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Mask {
    Cells { cells: Vec<[usize; 2]> },
    /// `size` is `[height, width]`; `counts` alternate unset/set runs, starting with unset.
    Rle { size: [usize; 2], counts: Vec<usize> },
}

impl Mask {
    pub fn cells(&self) -> Result<Vec<(usize, usize)>> {
        match self {
            Mask::Cells { cells } => Ok(cells.iter().map(|c| (c[0], c[1])).collect()),
            Mask::Rle { size: [h, w], counts } => {
                let total: usize = counts.iter().sum();
                if total != h * w {
                    return Err(Error::ShapeMismatch(format!("run lengths sum to {total}, mask has {} cells", h * w)));
                }
                let mut out = Vec::new();
                let mut k = 0;
                for (i, &run) in counts.iter().enumerate() {
                    if i % 2 == 1 {
                        out.extend((k..k + run).map(|idx| (idx / h, idx % h)));
                    }
                    k += run;
                }
                Ok(out)
            }
        }
    }
}

/// Tight box `[min x, min y, max x + 1, max y + 1]` around the set cells.
pub fn mask_to_bbox(cells: &[(usize, usize)]) -> Result<BBox> {
    let first = cells.first().ok_or(Error::Empty("mask has no set cells"))?;
    let init = (first.0, first.1, first.0, first.1);
    let (x1, y1, x2, y2) = cells
        .iter()
        .fold(init, |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)));
    BBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64)
}

/// `"<category> is <adverb> <action>."`, dropping an empty adverb.
pub fn compose_caption(category: &str, adverb: &str, action: &str) -> Result<String> {
    let words = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    let (c, a) = (words(category), words(action));
    if c.is_empty() || a.is_empty() {
        return Err(Error::InvalidArgument("caption needs a category and an action".into()));
    }
    let adv = words(adverb);
    Ok(if adv.is_empty() { format!("{c} is {a}.") } else { format!("{c} is {adv} {a}.") })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceAnnotation {
    pub video_id: String,
    pub duration: f64,
    pub fps: f64,
    /// Sparse boxes in source pixel coordinates, keyed by frame index.
    #[serde(default)]
    pub boxes: Vec<TrackedBox>,
    #[serde(default)]
    pub masks: Vec<FrameMask>,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub triple: Option<CaptionTriple>,
    #[serde(default)]
    pub intervals: Vec<TimedCaption>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMask {
    pub t: usize,
    pub mask: Mask,
}

impl SourceAnnotation {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("{}: fps must be > 0, got {}", self.video_id, self.fps)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidArgument(format!("{}: duration must be > 0", self.video_id)));
        }
        for iv in &self.intervals {
            if !(0.0 <= iv.start && iv.start < iv.end && iv.end <= self.duration) {
                return Err(Error::InvalidArgument(format!(
                    "{}: interval [{}, {}) outside [0, {}]",
                    self.video_id, iv.start, iv.end, self.duration
                )));
            }
        }
        Ok(())
    }

    /// Box annotations merged with boxes derived from masks.
    pub fn annotations(&self) -> Result<AnnotationSet> {
        let mut boxes: BTreeMap<usize, BBox> = self.boxes.iter().map(|b| (b.t, b.bbox)).collect();
        for m in &self.masks {
            if boxes.contains_key(&m.t) {
                return Err(Error::InvalidArgument(format!("{}: frame {} has both a box and a mask", self.video_id, m.t)));
            }
            boxes.insert(m.t, mask_to_bbox(&m.mask.cells()?)?);
        }
        Ok(AnnotationSet::new(boxes))
    }

    /// Free-text caption, else the composed triple.
    pub fn global_caption(&self) -> Result<Option<String>> {
        match (&self.caption, &self.triple) {
            (Some(c), _) if !c.trim().is_empty() => Ok(Some(c.clone())),
            (_, Some(t)) => compose_caption(&t.category, &t.adverb, &t.action).map(Some),
            _ => Ok(None),
        }
    }

    /// Frame indices inside `clip`.
    pub fn frame_range(&self, clip: Interval) -> std::ops::Range<usize> {
        let lo = (clip.start * self.fps - 1e-9).ceil().max(0.0) as usize;
        let hi = (clip.end * self.fps - 1e-9).ceil().max(0.0) as usize;
        lo..hi.max(lo)
    }
}

/// Half-open span `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 2]", from = "[f64; 2]")]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.start, i.end]
    }
}

impl From<[f64; 2]> for Interval {
    fn from(a: [f64; 2]) -> Self {
        Interval { start: a[0], end: a[1] }
    }
}

impl Interval {
    pub fn overlap(&self, start: f64, end: f64) -> f64 {
        (self.end.min(end) - self.start.max(start)).max(0.0)
    }
}

/// `count` evenly spaced `seg_len` windows; fewer when they would overlap.
pub fn clip_crop(duration: f64, seg_len: f64, count: usize) -> Result<Vec<Interval>> {
    if !(seg_len > 0.0) || count == 0 {
        return Err(Error::InvalidArgument("seg_len must be > 0 and count >= 1".into()));
    }
    if duration < seg_len {
        return Err(Error::InvalidArgument(format!("duration {duration}s shorter than segment {seg_len}s")));
    }
    let mut count = count;
    if count > 1 && (duration - seg_len) / ((count - 1) as f64) < seg_len {
        count = (duration / seg_len).floor() as usize;
    }
    if count == 1 {
        return Ok(vec![Interval { start: 0.0, end: seg_len }]);
    }
    let gap = (duration - seg_len) / (count - 1) as f64;
    Ok((0..count)
        .map(|k| {
            let start = k as f64 * gap;
            Interval { start, end: (start + seg_len).min(duration) }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub video_id: String,
    pub clip: Interval,
    pub question: String,
    pub answer: String,
    pub seed_box: TrackedBox,
    pub tracking_list: TrackingList,
}

/// Where a QA pair's tracking list comes from.
#[derive(Debug, Clone, Copy)]
pub enum TrackSource<'a> {
    /// The annotated boxes themselves.
    Annotations,
    /// A precomputed list (for example from an external tracker), in source coordinates.
    External(&'a TrackingList),
    /// The baseline tracker over feature maps. `scale` maps source coordinates to grid cells.
    Baseline { features: &'a FrameFeatureSequence, scale: (f64, f64), config: TrackConfig },
}

fn caption_for(ann: &SourceAnnotation, clip: Interval) -> Result<String> {
    let mut best: Option<(f64, &TimedCaption)> = None;
    for iv in &ann.intervals {
        let o = clip.overlap(iv.start, iv.end);
        if o > 0.0 && best.map_or(true, |(b, _)| o > b) {
            best = Some((o, iv));
        }
    }
    if let Some((_, iv)) = best {
        return Ok(iv.caption.clone());
    }
    ann.global_caption()?
        .ok_or_else(|| Error::InvalidArgument(format!("{}: no caption for clip", ann.video_id)))
}

fn in_clip(list: &TrackingList, frames: &std::ops::Range<usize>) -> TrackingList {
    list.restrict(frames.clone())
}

pub fn build_qa(
    ann: &SourceAnnotation,
    clip: Interval,
    seed: u64,
    lib: &TemplateLibrary,
    source: TrackSource<'_>,
    tau: f64,
) -> Result<QaPair> {
    ann.validate()?;
    lib.validate()?;
    let frames = ann.frame_range(clip);
    let gt = ann.annotations()?.restrict(frames.clone());
    if gt.is_empty() {
        return Err(Error::Empty("no annotated frame inside the clip"));
    }
    let annotated: Vec<TrackedBox> = gt.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seed_box = annotated[rng.gen_range(0..annotated.len())];

    let tracking_list = match source {
        TrackSource::Annotations => TrackingList::new(annotated)?,
        TrackSource::External(list) => {
            let list = in_clip(list, &frames);
            reconcile(&list, &list, &gt, tau)?
        }
        TrackSource::Baseline { features, scale: (sx, sy), config } => {
            let scaled = AnnotationSet::from_entries(
                gt.iter()
                    .map(|e| Ok(TrackedBox::new(e.t, rescale_box(&e.bbox, sx, sy)?)))
                    .collect::<Result<Vec<_>>>()?,
            );
            let tracked = retrack_dual(features, &scaled, &config, tau)?;
            let back = tracked
                .iter()
                .map(|e| Ok(TrackedBox::new(e.t, rescale_box(&e.bbox, 1.0 / sx, 1.0 / sy)?)))
                .collect::<Result<Vec<_>>>()?;
            in_clip(&TrackingList::new(back)?, &frames)
        }
    };

    let (ri, ti) = choose_refer_templates(lib, seed);
    Ok(QaPair {
        video_id: ann.video_id.clone(),
        clip,
        question: format!("{} {}", lib.refer_instructions[ri], lib.track_instructions[ti]),
        answer: caption_for(ann, clip)?,
        seed_box,
        tracking_list,
    })
}

pub fn export_dataset(pairs: &[QaPair], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path, pairs)
}

pub fn import_dataset(path: impl AsRef<Path>) -> Result<Vec<QaPair>> {
    read_jsonl(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxFormat {
    #[default]
    Xyxy,
    Xywh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClipStrategy {
    /// One clip covering the whole video.
    Whole,
    /// Evenly spaced fixed-length windows.
    Crop { seg_len: f64, count: usize },
    /// One clip per captioned time interval.
    Intervals,
}

/// Field mapping from one dataset's JSON records onto [`SourceAnnotation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSpec {
    pub name: String,
    pub id_field: String,
    pub duration_field: String,
    pub fps_field: String,
    /// Array of objects carrying `frame_key` and `box_key`.
    pub boxes_field: Option<String>,
    pub box_format: BoxFormat,
    /// Array of objects carrying `frame_key` and `mask_key`.
    pub masks_field: Option<String>,
    pub frame_key: String,
    pub box_key: String,
    pub mask_key: String,
    pub caption_field: Option<String>,
    /// Category, adverb and action fields.
    pub triple_fields: Option<[String; 3]>,
    /// Array of `{start, end, caption}` objects.
    pub intervals_field: Option<String>,
    pub clip: ClipStrategy,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            id_field: "video_id".into(),
            duration_field: "duration".into(),
            fps_field: "fps".into(),
            boxes_field: Some("boxes".into()),
            box_format: BoxFormat::Xyxy,
            masks_field: None,
            frame_key: "frame".into(),
            box_key: "bbox".into(),
            mask_key: "mask".into(),
            caption_field: Some("caption".into()),
            triple_fields: None,
            intervals_field: None,
            clip: ClipStrategy::Whole,
        }
    }
}

pub const PRESETS: [&str; 7] = ["hcstvg", "a2d", "lasot", "got10k", "mgit", "mevis", "vid_sentence"];

impl AdapterSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let base = AdapterSpec { name: name.into(), ..Default::default() };
        Ok(match name {
            "hcstvg" => AdapterSpec { box_format: BoxFormat::Xywh, ..base },
            "a2d" => AdapterSpec { caption_field: Some("sentence".into()), ..base },
            "lasot" => AdapterSpec {
                box_format: BoxFormat::Xywh,
                clip: ClipStrategy::Crop { seg_len: 10.0, count: 3 },
                ..base
            },
            "got10k" => AdapterSpec {
                box_format: BoxFormat::Xywh,
                caption_field: None,
                triple_fields: Some(["object_class".into(), "motion_adverb".into(), "motion_class".into()]),
                ..base
            },
            "mgit" => AdapterSpec {
                box_format: BoxFormat::Xywh,
                caption_field: None,
                intervals_field: Some("actions".into()),
                clip: ClipStrategy::Intervals,
                ..base
            },
            "mevis" => AdapterSpec {
                boxes_field: None,
                masks_field: Some("masks".into()),
                caption_field: Some("expression".into()),
                ..base
            },
            "vid_sentence" => AdapterSpec { caption_field: Some("sentence".into()), ..base },
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown adapter {name:?}; presets are {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// A preset name, or a path to a JSON adapter file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if PRESETS.contains(&name_or_path) {
            return Self::preset(name_or_path);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Self::preset(name_or_path);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    fn ctx(&self, what: &str) -> String {
        format!("{} adapter: {what}", self.name)
    }

    fn field<'v>(&self, rec: &'v Value, key: &str) -> Result<&'v Value> {
        rec.get(key).ok_or_else(|| Error::InvalidArgument(self.ctx(&format!("missing field {key:?}"))))
    }

    fn number(&self, rec: &Value, key: &str) -> Result<f64> {
        self.field(rec, key)?
            .as_f64()
            .ok_or_else(|| Error::InvalidArgument(self.ctx(&format!("field {key:?} is not a number"))))
    }

    fn string(&self, rec: &Value, key: &str) -> Result<String> {
        match self.field(rec, key)? {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(Error::InvalidArgument(self.ctx(&format!("field {key:?} is not a string")))),
        }
    }

    fn array<'v>(&self, rec: &'v Value, key: &str) -> Result<&'v Vec<Value>> {
        self.field(rec, key)?
            .as_array()
            .ok_or_else(|| Error::InvalidArgument(self.ctx(&format!("field {key:?} is not an array"))))
    }

    fn frame(&self, item: &Value) -> Result<usize> {
        self.field(item, &self.frame_key)?
            .as_u64()
            .map(|t| t as usize)
            .ok_or_else(|| Error::InvalidArgument(self.ctx("frame index is not a non-negative integer")))
    }

    fn decode<T: serde::de::DeserializeOwned>(&self, v: &Value, what: &str) -> Result<T> {
        serde_json::from_value(v.clone()).map_err(|e| Error::json(self.ctx(what), e))
    }

    pub fn parse(&self, rec: &Value) -> Result<SourceAnnotation> {
        let mut boxes = Vec::new();
        if let Some(key) = &self.boxes_field {
            for item in self.array(rec, key)? {
                let [a, b, c, d]: [f64; 4] = self.decode(self.field(item, &self.box_key)?, "box")?;
                let bbox = match self.box_format {
                    BoxFormat::Xyxy => BBox::new(a, b, c, d)?,
                    BoxFormat::Xywh => BBox::from_xywh(a, b, c, d)?,
                };
                boxes.push(TrackedBox::new(self.frame(item)?, bbox));
            }
        }
        let mut masks = Vec::new();
        if let Some(key) = &self.masks_field {
            for item in self.array(rec, key)? {
                let mask: Mask = self.decode(self.field(item, &self.mask_key)?, "mask")?;
                masks.push(FrameMask { t: self.frame(item)?, mask });
            }
        }
        let caption = match &self.caption_field {
            Some(k) if rec.get(k).is_some() => Some(self.string(rec, k)?),
            _ => None,
        };
        let triple = match &self.triple_fields {
            Some([c, a, x]) => Some(CaptionTriple {
                category: self.string(rec, c)?,
                adverb: rec.get(a).map(|_| self.string(rec, a)).transpose()?.unwrap_or_default(),
                action: self.string(rec, x)?,
            }),
            None => None,
        };
        let intervals = match &self.intervals_field {
            Some(k) => self.decode(self.field(rec, k)?, "intervals")?,
            None => Vec::new(),
        };
        let ann = SourceAnnotation {
            video_id: self.string(rec, &self.id_field)?,
            duration: self.number(rec, &self.duration_field)?,
            fps: self.number(rec, &self.fps_field)?,
            boxes,
            masks,
            caption,
            triple,
            intervals,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn clips(&self, ann: &SourceAnnotation) -> Result<Vec<Interval>> {
        match self.clip {
            ClipStrategy::Whole => Ok(vec![Interval { start: 0.0, end: ann.duration }]),
            ClipStrategy::Crop { seg_len, count } => clip_crop(ann.duration, seg_len, count),
            ClipStrategy::Intervals => Ok(ann.intervals.iter().map(|iv| Interval { start: iv.start, end: iv.end }).collect()),
        }
    }
}

/// Seed for the `clip`-th clip of the `record`-th source, derived from the run seed.
pub fn derive_seed(seed: u64, record: usize, clip: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((record as u64) << 16) | clip as u64);
    rng.gen()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationStats {
    pub sources: usize,
    pub clips: usize,
    pub pairs: usize,
    /// Clips dropped because no annotated frame falls inside them.
    pub skipped_clips: usize,
}

/// Builds every QA pair for the given sources. `tracks` may supply an external tracking list
/// per video id; otherwise the annotations serve as the list.
pub fn curate(
    records: &[Value],
    adapter: &AdapterSpec,
    lib: &TemplateLibrary,
    seed: u64,
    tracks: &BTreeMap<String, TrackingList>,
    tau: f64,
) -> Result<(Vec<QaPair>, CurationStats)> {
    use rayon::prelude::*;
    let per_source: Vec<Result<(Vec<QaPair>, usize, usize)>> = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let ann = adapter.parse(rec)?;
            let clips = adapter.clips(&ann)?;
            let mut pairs = Vec::new();
            let mut skipped = 0;
            for (k, clip) in clips.iter().enumerate() {
                let source = match tracks.get(&ann.video_id) {
                    Some(list) => TrackSource::External(list),
                    None => TrackSource::Annotations,
                };
                match build_qa(&ann, *clip, derive_seed(seed, i, k), lib, source, tau) {
                    Ok(p) => pairs.push(p),
                    Err(Error::Empty(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((pairs, clips.len(), skipped))
        })
        .collect();
    let mut stats = CurationStats { sources: records.len(), ..Default::default() };
    let mut out = Vec::new();
    for r in per_source {
        let (pairs, clips, skipped) = r?;
        stats.clips += clips;
        stats.skipped_clips += skipped;
        out.extend(pairs);
    }
    stats.pairs = out.len();
    Ok((out, stats))
}
