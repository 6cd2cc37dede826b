//! Continuous-coordinate region pooling (RoIAlign) over one frame feature map.
//!
//! Feature cell `(ix, iy)` is a lattice point at `(ix + 0.5, iy + 0.5)`. A box is split into
//! `G x G` equal bins, each bin is sampled at `k x k` regularly spaced interior points by
//! bilinear interpolation, and the bin value is the sample mean. Sample points that fall
//! outside the lattice are clamped to the border (replicate padding). The region token is
//! the mean over all bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureMap, FrameFeatureSequence, Tensor};
use crate::geometry::{clip_box, BBox, TrackedBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiAlignConfig {
    pub grid_size: usize,
    pub samples_per_bin: usize,
    /// Keep the `G x G x D` bin grid on the output for diagnostics.
    pub keep_grid: bool,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        Self {
            grid_size: 7,
            samples_per_bin: 2,
            keep_grid: false,
        }
    }
}

impl RoiAlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.samples_per_bin == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid_size and samples_per_bin must be >= 1, got {} and {}",
                self.grid_size, self.samples_per_bin
            )));
        }
        Ok(())
    }
}

/// Target-specific feature for one tracked box.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub source: TrackedBox,
    pub vector: Vec<f32>,
    /// `G x G x D` bin values, row-major `(bin_y, bin_x, d)`, when requested.
    pub grid: Option<Vec<f32>>,
}

/// Bilinear sample at continuous coordinate `(x, y)`, accumulated into `out` with `weight`.
fn accumulate_bilinear(map: &FeatureMap<'_>, x: f64, y: f64, weight: f64, out: &mut [f64]) {
    let max_u = (map.grid_w() - 1) as f64;
    let max_v = (map.grid_h() - 1) as f64;
    let u = (x - 0.5).clamp(0.0, max_u);
    let v = (y - 0.5).clamp(0.0, max_v);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(map.grid_w() - 1);
    let y1 = (y0 + 1).min(map.grid_h() - 1);
    let lx = u - x0 as f64;
    let ly = v - y0 as f64;
    let corners = [
        (y0, x0, (1.0 - lx) * (1.0 - ly)),
        (y0, x1, lx * (1.0 - ly)),
        (y1, x0, (1.0 - lx) * ly),
        (y1, x1, lx * ly),
    ];
    for (cy, cx, w) in corners {
        if w == 0.0 {
            continue;
        }
        let w = w * weight;
        for (o, &f) in out.iter_mut().zip(map.cell(cy, cx)) {
            *o += w * f as f64;
        }
    }
}

/// Pools `bbox` (feature-grid units) to `G x G` bins; returns `(vector, grid)` in `f64`.
pub fn roi_align_raw(map: &FeatureMap<'_>, bbox: &BBox, cfg: &RoiAlignConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    if map.grid_w() == 0 || map.grid_h() == 0 {
        return Err(Error::Empty("feature map has no cells"));
    }
    let b = clip_box(bbox, map.grid_w() as f64, map.grid_h() as f64)?;
    let g = cfg.grid_size;
    let k = cfg.samples_per_bin;
    let dim = map.dim();
    let bin_w = b.width() / g as f64;
    let bin_h = b.height() / g as f64;
    let sample_weight = 1.0 / (k * k) as f64;
    let mut grid = vec![0.0f64; g * g * dim];
    for by in 0..g {
        for bx in 0..g {
            let cell = &mut grid[(by * g + bx) * dim..(by * g + bx + 1) * dim];
            for sy in 0..k {
                let y = b.y1() + (by as f64 + (sy as f64 + 0.5) / k as f64) * bin_h;
                for sx in 0..k {
                    let x = b.x1() + (bx as f64 + (sx as f64 + 0.5) / k as f64) * bin_w;
                    accumulate_bilinear(map, x, y, sample_weight, cell);
                }
            }
        }
    }
    let mut vector = vec![0.0f64; dim];
    for cell in grid.chunks_exact(dim.max(1)) {
        for (v, &c) in vector.iter_mut().zip(cell) {
            *v += c;
        }
    }
    let inv = 1.0 / (g * g) as f64;
    vector.iter_mut().for_each(|v| *v *= inv);
    Ok((vector, grid))
}

pub fn roi_align(map: &FeatureMap<'_>, source: TrackedBox, cfg: &RoiAlignConfig) -> Result<RoiFeature> {
    let (vector, grid) = roi_align_raw(map, &source.bbox, cfg)?;
    Ok(RoiFeature {
        source,
        vector: vector.into_iter().map(|v| v as f32).collect(),
        grid: cfg
            .keep_grid
            .then(|| grid.into_iter().map(|v| v as f32).collect()),
    })
}

/// Aligns every box against its own frame of `seq`.
pub fn align_track<'a>(
    seq: &FrameFeatureSequence,
    boxes: impl IntoIterator<Item = &'a TrackedBox>,
    cfg: &RoiAlignConfig,
) -> Result<Vec<RoiFeature>> {
    use rayon::prelude::*;
    let boxes: Vec<TrackedBox> = boxes.into_iter().copied().collect();
    boxes
        .par_iter()
        .map(|tb| roi_align(&seq.slice_frame(tb.t)?, *tb, cfg))
        .collect()
}

/// Stacks RoI vectors into a rank-2 `[N, D]` tensor.
pub fn rois_to_tensor(rois: &[RoiFeature]) -> Result<Tensor> {
    let dim = rois.first().map_or(0, |r| r.vector.len());
    if rois.iter().any(|r| r.vector.len() != dim) {
        return Err(Error::ShapeMismatch("RoI vectors differ in length".into()));
    }
    let data = rois.iter().flat_map(|r| r.vector.iter().copied()).collect();
    Tensor::new(vec![rois.len(), dim], data)
}

/// Pairs rows of an `[N, D]` tensor with their source boxes.
pub fn rois_from_tensor(tensor: &Tensor, sources: &[TrackedBox]) -> Result<Vec<RoiFeature>> {
    let [n, dim] = tensor.dims[..] else {
        return Err(Error::ShapeMismatch(format!(
            "RoI tensor must be rank 2 [N, D], got dims {:?}",
            tensor.dims
        )));
    };
    if n != sources.len() {
        return Err(Error::ShapeMismatch(format!(
            "{n} RoI vectors but {} source boxes",
            sources.len()
        )));
    }
    Ok(sources
        .iter()
        .enumerate()
        .map(|(i, s)| RoiFeature {
            source: *s,
            vector: tensor.data[i * dim..(i + 1) * dim].to_vec(),
            grid: None,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn cfg(g: usize, k: usize) -> RoiAlignConfig {
        RoiAlignConfig {
            grid_size: g,
            samples_per_bin: k,
            keep_grid: true,
        }
    }

    /// Dense oracle: evaluates every sample point with an explicit four-corner formula.
    fn oracle(data: &[f32], h: usize, w: usize, dim: usize, bx: &BBox, g: usize, k: usize) -> Vec<f64> {
        let at = |y: usize, x: usize, d: usize| data[(y * w + x) * dim + d] as f64;
        let mut out = vec![0.0; dim];
        let n = (g * k) as f64;
        let (x1, y1) = (bx.x1().max(0.0), bx.y1().max(0.0));
        let (x2, y2) = (bx.x2().min(w as f64), bx.y2().min(h as f64));
        for i in 0..g * k {
            for j in 0..g * k {
                // the G*k points per axis are equally spaced at half-step offsets
                let x = x1 + (j as f64 + 0.5) * (x2 - x1) / n;
                let y = y1 + (i as f64 + 0.5) * (y2 - y1) / n;
                let u = (x - 0.5).max(0.0).min((w - 1) as f64);
                let v = (y - 0.5).max(0.0).min((h - 1) as f64);
                let (fx, fy) = (u.floor(), v.floor());
                let (xa, ya) = (fx as usize, fy as usize);
                let (xb, yb) = ((xa + 1).min(w - 1), (ya + 1).min(h - 1));
                let (ax, ay) = (u - fx, v - fy);
                for d in 0..dim {
                    let top = at(ya, xa, d) * (1.0 - ax) + at(ya, xb, d) * ax;
                    let bot = at(yb, xa, d) * (1.0 - ax) + at(yb, xb, d) * ax;
                    out[d] += top * (1.0 - ay) + bot * ay;
                }
            }
        }
        out.iter().map(|v| v / (n * n)).collect()
    }

    #[test]
    fn constant_map() {
        let data = vec![3.25f32; 5 * 6 * 2];
        let map = FeatureMap::new(5, 6, 2, &data).unwrap();
        let r = roi_align(&map, TrackedBox::new(0, b(0.3, 1.1, 4.9, 4.2)), &cfg(3, 2)).unwrap();
        for v in r.vector {
            assert!((v - 3.25).abs() < 1e-6);
        }
    }

    #[test]
    fn ramp_gives_box_center() {
        // cell value = its center abscissa
        let (h, w) = (8, 8);
        let data: Vec<f32> = (0..h * w).map(|i| (i % w) as f32 + 0.5).collect();
        let map = FeatureMap::new(h, w, 1, &data).unwrap();
        for (g, k) in [(1, 1), (2, 2), (7, 2), (4, 3)] {
            let (v, _) = roi_align_raw(&map, &b(2., 2., 6., 6.), &cfg(g, k)).unwrap();
            assert!((v[0] - 4.0).abs() < 1e-9, "G={g} k={k}: {}", v[0]);
        }
    }

    #[test]
    fn random_map_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..4 * 4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = FeatureMap::new(4, 4, 2, &data).unwrap();
        let bx = b(0.5, 0.5, 3.5, 3.5);
        let (v, _) = roi_align_raw(&map, &bx, &cfg(2, 2)).unwrap();
        for (a, o) in v.iter().zip(oracle(&data, 4, 4, 2, &bx, 2, 2)) {
            assert!((a - o).abs() < 1e-5);
        }
    }

    #[test]
    fn vector_is_mean_of_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f32> = (0..5 * 5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = FeatureMap::new(5, 5, 3, &data).unwrap();
        let r = roi_align(&map, TrackedBox::new(0, b(0.2, 1.0, 4.4, 3.9)), &cfg(3, 2)).unwrap();
        let grid = r.grid.unwrap();
        for d in 0..3 {
            let mean: f32 = grid.chunks_exact(3).map(|c| c[d]).sum::<f32>() / 9.0;
            assert!((mean - r.vector[d]).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_and_outside_boxes() {
        let data = vec![0f32; 4 * 4];
        let map = FeatureMap::new(4, 4, 1, &data).unwrap();
        assert!(matches!(
            roi_align_raw(&map, &b(5., 5., 6., 6.), &cfg(2, 2)),
            Err(Error::DegenerateBox { .. })
        ));
        assert!(roi_align_raw(&map, &b(0., 0., 1., 1.), &cfg(0, 2)).is_err());
        assert!(roi_align_raw(&map, &b(0., 0., 1., 1.), &cfg(2, 0)).is_err());
    }

    #[test]
    fn edge_boxes_use_replicate_padding() {
        let data: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0];
        let map = FeatureMap::new(2, 2, 1, &data).unwrap();
        // the top-left quarter only ever samples cell (0,0)
        let (v, _) = roi_align_raw(&map, &b(0., 0., 0.5, 0.5), &cfg(2, 2)).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_round_trip() {
        let rois = vec![
            RoiFeature { source: TrackedBox::new(1, b(0., 0., 1., 1.)), vector: vec![1., 2.], grid: None },
            RoiFeature { source: TrackedBox::new(4, b(1., 1., 2., 2.)), vector: vec![3., 4.], grid: None },
        ];
        let t = rois_to_tensor(&rois).unwrap();
        assert_eq!(t.dims, vec![2, 2]);
        let sources: Vec<TrackedBox> = rois.iter().map(|r| r.source).collect();
        assert_eq!(rois_from_tensor(&t, &sources).unwrap(), rois);
        assert!(rois_from_tensor(&t, &sources[..1]).is_err());
    }
}
