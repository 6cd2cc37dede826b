//! Axis-aligned boxes in continuous coordinates, frame-indexed boxes and tracking lists.
//!
//! Boxes are half-open real rectangles `[x1, x2) x [y1, y2)`; there is no `+1` pixel
//! convention anywhere in the crate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// A rectangle with strictly positive area. Serializes as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from a top-left corner plus width and height.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Same-size box moved by `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Touching boxes have IoU exactly 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Clamps a box to `[0, width] x [0, height]`.
pub fn clip_box(b: &BBox, width: f64, height: f64) -> Result<BBox> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip extent must be positive, got {width}x{height}"
        )));
    }
    let x1 = b.x1.clamp(0.0, width);
    let x2 = b.x2.clamp(0.0, width);
    let y1 = b.y1.clamp(0.0, height);
    let y2 = b.y2.clamp(0.0, height);
    BBox::new(x1, y1, x2, y2).map_err(|_| Error::DegenerateBox { width, height })
}

/// Multiplies x coordinates by `sx` and y coordinates by `sy`.
pub fn rescale_box(b: &BBox, sx: f64, sy: f64) -> Result<BBox> {
    if !(sx > 0.0 && sy > 0.0 && sx.is_finite() && sy.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scale factors must be positive and finite, got ({sx}, {sy})"
        )));
    }
    BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy)
}

/// A box anchored to frame `t`. Serializes as `{"t": t, "box": [..]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedBox {
    pub t: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl TrackedBox {
    pub fn new(t: usize, bbox: BBox) -> Self {
        Self { t, bbox }
    }
}

impl std::str::FromStr for TrackedBox {
    type Err = Error;

    /// Parses `"t,x1,y1,x2,y2"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::InvalidArgument(format!("expected \"t,x1,y1,x2,y2\", got {s:?}"));
        if parts.len() != 5 {
            return Err(bad());
        }
        let t: usize = parts[0].parse().map_err(|_| bad())?;
        let mut c = [0.0; 4];
        for (slot, part) in c.iter_mut().zip(&parts[1..]) {
            *slot = part.parse().map_err(|_| bad())?;
        }
        Ok(Self::new(t, BBox::try_from(c)?))
    }
}

/// Per-frame boxes for one target, frame indices strictly increasing.
///
/// Frames where the target was not found are simply absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TrackedBox>", into = "Vec<TrackedBox>")]
pub struct TrackingList {
    entries: Vec<TrackedBox>,
}

impl TrackingList {
    pub fn new(entries: Vec<TrackedBox>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[0].t >= w[1].t {
                return Err(Error::UnorderedTrack {
                    prev: w[0].t,
                    next: w[1].t,
                });
            }
        }
        Ok(Self { entries })
    }

    /// Sorts by frame; later duplicates of a frame are dropped.
    pub fn from_unsorted(mut entries: Vec<TrackedBox>) -> Self {
        entries.sort_by_key(|e| e.t);
        entries.dedup_by_key(|e| e.t);
        Self { entries }
    }

    pub fn entries(&self) -> &[TrackedBox] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<&TrackedBox> {
        self.entries
            .binary_search_by_key(&t, |e| e.t)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.t)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TrackedBox> {
        self.entries.iter()
    }

    pub fn into_entries(self) -> Vec<TrackedBox> {
        self.entries
    }

    /// Entries whose frame lies in `range`.
    pub fn restrict(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|e| range.contains(&e.t))
                .copied()
                .collect(),
        }
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(jsonl::read_jsonl(path)?)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        jsonl::write_jsonl(path, &self.entries)
    }
}

impl TryFrom<Vec<TrackedBox>> for TrackingList {
    type Error = Error;

    fn try_from(v: Vec<TrackedBox>) -> Result<Self> {
        TrackingList::new(v)
    }
}

impl From<TrackingList> for Vec<TrackedBox> {
    fn from(l: TrackingList) -> Self {
        l.entries
    }
}

impl<'a> IntoIterator for &'a TrackingList {
    type Item = &'a TrackedBox;
    type IntoIter = std::slice::Iter<'a, TrackedBox>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}
