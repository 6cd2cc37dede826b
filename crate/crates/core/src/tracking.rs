//! Tracking lists: a baseline feature-correlation tracker, IoU reconciliation against sparse
//! ground truth, and uniform temporal subsampling.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FrameFeatureSequence;
use crate::geometry::{iou, BBox, TrackedBox, TrackingList};
use crate::jsonl;
use crate::roi_align::{roi_align_raw, RoiAlignConfig};

/// Default IoU threshold below which tracked boxes are dropped during reconciliation.
pub const DEFAULT_TAU: f64 = 0.5;

/// Similarity scores within this margin of the best count as a tie.
const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    /// Maximum displacement per frame, in grid cells, along each axis.
    pub search_radius: f64,
    /// Frames whose best cosine similarity falls below this are omitted.
    pub min_similarity: f64,
    /// Spacing of the candidate displacement lattice.
    pub step: f64,
    pub roi: RoiAlignConfig,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            search_radius: 2.0,
            min_similarity: 0.5,
            step: 0.5,
            roi: RoiAlignConfig::default(),
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.search_radius >= 1.0 && self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "search_radius must be >= 1 and step > 0, got {} and {}",
                self.search_radius, self.step
            )));
        }
        if !(-1.0..=1.0).contains(&self.min_similarity) {
            return Err(Error::InvalidArgument(format!(
                "min_similarity must lie in [-1, 1], got {}",
                self.min_similarity
            )));
        }
        self.roi.validate()
    }

    /// Displacements on the step lattice inside the search square, nearest first.
    fn offsets(&self) -> Vec<(f64, f64)> {
        let n = (self.search_radius / self.step + 1e-9).floor() as i64;
        let mut out = Vec::with_capacity(((2 * n + 1) * (2 * n + 1)) as usize);
        for iy in -n..=n {
            for ix in -n..=n {
                out.push((ix as f64 * self.step, iy as f64 * self.step));
            }
        }
        out.sort_by(|a, b| {
            let da = a.0 * a.0 + a.1 * a.1;
            let db = b.0 * b.0 + b.1 * b.1;
            da.total_cmp(&db)
        });
        out
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Follows the seed box forward and backward through `seq`.
///
/// Each step searches same-size boxes displaced from the last accepted location and keeps the
/// one whose RoI vector is most similar to the seed's. Near-ties go to the smaller displacement.
/// Frames whose best similarity is below `min_similarity` are left out, and the search for the
/// next frame restarts from the last accepted box.
pub fn track(seq: &FrameFeatureSequence, seed: TrackedBox, cfg: &TrackConfig) -> Result<TrackingList> {
    cfg.validate()?;
    let template = roi_align_raw(&seq.slice_frame(seed.t)?, &seed.bbox, &cfg.roi)?.0;
    let offsets = cfg.offsets();

    let step = |t: usize, prev: &BBox| -> Result<Option<BBox>> {
        let map = seq.slice_frame(t)?;
        let mut best: Option<(f64, BBox)> = None;
        for &(dx, dy) in &offsets {
            let cand = prev.translate(dx, dy)?;
            let vec = match roi_align_raw(&map, &cand, &cfg.roi) {
                Ok((v, _)) => v,
                Err(Error::DegenerateBox { .. }) => continue,
                Err(e) => return Err(e),
            };
            let sim = cosine_similarity(&vec, &template);
            if best.map_or(true, |(s, _)| sim > s + TIE_EPS) {
                best = Some((sim, cand));
            }
        }
        Ok(best
            .filter(|(s, _)| *s >= cfg.min_similarity)
            .map(|(_, b)| b))
    };

    let mut entries = vec![seed];
    let mut prev = seed.bbox;
    for t in seed.t + 1..seq.t_count() {
        if let Some(b) = step(t, &prev)? {
            entries.push(TrackedBox::new(t, b));
            prev = b;
        }
    }
    let mut prev = seed.bbox;
    for t in (0..seed.t).rev() {
        if let Some(b) = step(t, &prev)? {
            entries.push(TrackedBox::new(t, b));
            prev = b;
        }
    }
    entries.sort_by_key(|e| e.t);
    TrackingList::new(entries)
}

/// Sparse ground-truth boxes keyed by frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    boxes: BTreeMap<usize, BBox>,
}

impl AnnotationSet {
    pub fn new(boxes: BTreeMap<usize, BBox>) -> Self {
        Self { boxes }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = TrackedBox>) -> Self {
        Self {
            boxes: entries.into_iter().map(|e| (e.t, e.bbox)).collect(),
        }
    }

    pub fn get(&self, t: usize) -> Option<&BBox> {
        self.boxes.get(&t)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = TrackedBox> + '_ {
        self.boxes.iter().map(|(&t, &b)| TrackedBox::new(t, b))
    }

    /// Annotations with frame in `range`.
    pub fn restrict(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            boxes: self.boxes.range(range).map(|(&t, &b)| (t, b)).collect(),
        }
    }

    /// First and middle annotated frames, used as the two tracker references.
    pub fn reference_frames(&self) -> Option<(TrackedBox, TrackedBox)> {
        let all: Vec<TrackedBox> = self.iter().collect();
        let first = *all.first()?;
        Some((first, all[all.len() / 2]))
    }

    pub fn check_within(&self, t_count: usize) -> Result<()> {
        match self.boxes.keys().next_back() {
            Some(&t) if t >= t_count => Err(Error::OutOfRange { index: t, len: t_count }),
            _ => Ok(()),
        }
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let entries: Vec<TrackedBox> = jsonl::read_jsonl(path)?;
        Ok(Self::from_entries(entries))
    }
}

/// Merges two tracking lists and drops entries that disagree with the annotations.
///
/// On an annotated frame the candidate with the higher IoU wins (ties go to `list_a`) and
/// survives only when that IoU is at least `tau`. Unannotated frames keep `list_a`'s entry
/// when present, otherwise `list_b`'s.
pub fn reconcile(list_a: &TrackingList, list_b: &TrackingList, gt: &AnnotationSet, tau: f64) -> Result<TrackingList> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    let mut frames: BTreeMap<usize, (Option<BBox>, Option<BBox>)> = BTreeMap::new();
    for e in list_a {
        frames.entry(e.t).or_default().0 = Some(e.bbox);
    }
    for e in list_b {
        frames.entry(e.t).or_default().1 = Some(e.bbox);
    }
    let mut out = Vec::with_capacity(frames.len());
    for (t, (a, b)) in frames {
        let chosen = match gt.get(t) {
            Some(truth) => {
                let score = |c: Option<BBox>| c.map(|c| (iou(&c, truth), c));
                match (score(a), score(b)) {
                    (Some(sa), Some(sb)) => Some(if sb.0 > sa.0 { sb } else { sa }),
                    (sa, sb) => sa.or(sb),
                }
                .filter(|(s, _)| *s >= tau)
                .map(|(_, c)| c)
            }
            None => a.or(b),
        };
        if let Some(c) = chosen {
            out.push(TrackedBox::new(t, c));
        }
    }
    TrackingList::new(out)
}

/// Picks `n` entries at positions `round(i * (len - 1) / (n - 1))`; all entries if `len <= n`.
pub fn sample_track(list: &TrackingList, n: usize) -> Result<TrackingList> {
    if list.is_empty() {
        return Err(Error::Empty("tracking list"));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let positions = even_positions(list.len(), n);
    TrackingList::new(positions.into_iter().map(|i| list.entries()[i]).collect())
}

/// Evenly spread indices into `0..len`, rounding halves up. Returns `0..len` when `len <= n`.
pub fn even_positions(len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    if n == 1 {
        return vec![0];
    }
    let span = 2 * (n - 1);
    (0..n)
        .map(|i| (2 * i * (len - 1) + (n - 1)) / span)
        .collect()
}

/// Re-tracks from the first and middle annotated frames and reconciles both lists against the
/// annotations.
pub fn retrack_dual(seq: &FrameFeatureSequence, gt: &AnnotationSet, cfg: &TrackConfig, tau: f64) -> Result<TrackingList> {
    let (first, middle) = gt
        .reference_frames()
        .ok_or(Error::Empty("annotation set has no frames"))?;
    gt.check_within(seq.t_count())?;
    let a = track(seq, first, cfg)?;
    let b = if middle == first {
        a.clone()
    } else {
        track(seq, middle, cfg)?
    };
    reconcile(&a, &b, gt, tau)
}
