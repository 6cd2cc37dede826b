//! Reduces a tracked RoI list to `M` representatives.
//!
//! The main method clusters RoI vectors with k-means (k-means++ seeding, Lloyd iterations,
//! several restarts) and keeps one member per cluster. Uniform, random and first-`M` selection
//! are provided as baselines.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diversity_analysis::{analyze, DiversityReport, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::roi_align::RoiFeature;
use crate::tracking::even_positions;

/// Tracked boxes fed to selection.
pub const DEFAULT_INPUT_BOXES: usize = 8;
/// Boxes kept after selection.
pub const DEFAULT_SELECTED: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Clustering,
    Uniform,
    Random,
    None,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 4] = [
        SelectionMethod::Clustering,
        SelectionMethod::Uniform,
        SelectionMethod::Random,
        SelectionMethod::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::Clustering => "clustering",
            SelectionMethod::Uniform => "uniform",
            SelectionMethod::Random => "random",
            SelectionMethod::None => "none",
        }
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown selection method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representative {
    RandomMember,
    Medoid,
}

impl std::str::FromStr for Representative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_member" => Ok(Representative::RandomMember),
            "medoid" => Ok(Representative::Medoid),
            _ => Err(Error::InvalidArgument(format!("unknown representative {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub m: usize,
    pub method: SelectionMethod,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub representative: Representative,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_SELECTED,
            method: SelectionMethod::Clustering,
            restarts: 10,
            max_iters: 100,
            seed: 0,
            representative: Representative::Medoid,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::InvalidArgument(format!(
                "m, restarts and max_iters must be >= 1, got {}, {}, {}",
                self.m, self.restarts, self.max_iters
            )));
        }
        Ok(())
    }
}

/// Result of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step, then after the final centroid update.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn inertia(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &k)| sq_dist(p, &centroids[k]))
        .sum()
}

fn kmeans_pp_init(points: &[Vec<f64>], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Moves points into empty clusters: each empty cluster takes the point farthest from its own
/// centroid among clusters that have more than one member.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>]) {
    let m = centroids.len();
    loop {
        let mut sizes = vec![0usize; m];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = (usize::MAX, -1.0);
        for (i, p) in points.iter().enumerate() {
            if sizes[assignments[i]] > 1 {
                let d = sq_dist(p, &centroids[assignments[i]]);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        assignments[far.0] = empty;
        centroids[empty] = points[far.0].clone();
    }
}

fn means(points: &[Vec<f64>], assignments: &[usize], m: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; m];
    let mut counts = vec![0usize; m];
    for (p, &k) in points.iter().zip(assignments) {
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, c) in sums.iter_mut().zip(counts) {
        let inv = 1.0 / c as f64;
        s.iter_mut().for_each(|v| *v *= inv);
    }
    sums
}

fn lloyd(points: &[Vec<f64>], m: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> Clustering {
    let mut centroids = kmeans_pp_init(points, m, rng);
    let mut assignments: Option<Vec<usize>> = None;
    let mut trace = Vec::new();
    for _ in 0..max_iters {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(points, &mut next, &mut centroids);
        trace.push(inertia(points, &next, &centroids));
        if assignments.as_ref() == Some(&next) {
            break;
        }
        centroids = means(points, &next, m);
        assignments = Some(next);
    }
    let assignments = assignments.expect("max_iters >= 1");
    let final_inertia = inertia(points, &assignments, &centroids);
    trace.push(final_inertia);
    Clustering {
        assignments,
        centroids,
        inertia: final_inertia,
        trace,
    }
}

fn check_points(vectors: &[Vec<f64>], m: usize) -> Result<()> {
    if vectors.is_empty() {
        return Err(Error::Empty("no vectors to cluster"));
    }
    if m == 0 || m > vectors.len() {
        return Err(Error::InvalidArgument(format!(
            "cluster count {m} must lie in 1..={}",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch("vectors differ in length".into()));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("vectors must be finite".into()));
    }
    Ok(())
}

/// Every restart, in order. Restart `r` draws from stream `r` of a generator seeded with `seed`.
pub fn kmeans_runs(vectors: &[Vec<f64>], m: usize, restarts: usize, max_iters: usize, seed: u64) -> Result<Vec<Clustering>> {
    check_points(vectors, m)?;
    if restarts == 0 || max_iters == 0 {
        return Err(Error::InvalidArgument("restarts and max_iters must be >= 1".into()));
    }
    Ok((0..restarts)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(vectors, m, max_iters, &mut rng)
        })
        .collect())
}

/// Lowest-inertia run over `restarts`; the earliest restart wins ties.
pub fn kmeans(vectors: &[Vec<f64>], m: usize, restarts: usize, max_iters: usize, seed: u64) -> Result<Clustering> {
    let runs = kmeans_runs(vectors, m, restarts, max_iters, seed)?;
    let mut best: Option<Clustering> = None;
    for run in runs {
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Member minimizing the summed Euclidean distance to the other members; lowest index on ties.
fn medoid(points: &[Vec<f64>], members: &[usize]) -> usize {
    let mut best = (members[0], f64::INFINITY);
    for &i in members {
        let cost: f64 = members.iter().map(|&j| sq_dist(&points[i], &points[j]).sqrt()).sum();
        if cost < best.1 {
            best = (i, cost);
        }
    }
    best.0
}

/// Outcome of [`select_rois`].
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Positions into the input list, ascending by source frame.
    pub indices: Vec<usize>,
    pub rois: Vec<RoiFeature>,
    /// Set when fewer than `m` RoIs were available and all were returned.
    pub truncated: bool,
}

fn to_points(rois: &[RoiFeature]) -> Vec<Vec<f64>> {
    rois.iter()
        .map(|r| r.vector.iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn select_indices(rois: &[RoiFeature], cfg: &SelectionConfig) -> Result<(Vec<usize>, bool)> {
    cfg.validate()?;
    if rois.is_empty() {
        return Err(Error::Empty("no RoIs to select from"));
    }
    let n = rois.len();
    if cfg.m >= n {
        return Ok(((0..n).collect(), cfg.m > n));
    }
    let mut picked: Vec<usize> = match cfg.method {
        SelectionMethod::Clustering => {
            let points = to_points(rois);
            let c = kmeans(&points, cfg.m, cfg.restarts, cfg.max_iters, cfg.seed)?;
            let mut members = vec![Vec::new(); cfg.m];
            for (i, &k) in c.assignments.iter().enumerate() {
                members[k].push(i);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u64::MAX);
            members
                .iter()
                .map(|ms| match cfg.representative {
                    Representative::Medoid => medoid(&points, ms),
                    Representative::RandomMember => ms[rng.gen_range(0..ms.len())],
                })
                .collect()
        }
        SelectionMethod::Uniform => even_positions(n, cfg.m),
        SelectionMethod::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            sample(&mut rng, n, cfg.m).into_vec()
        }
        SelectionMethod::None => (0..cfg.m).collect(),
    };
    picked.sort_by_key(|&i| (rois[i].source.t, i));
    Ok((picked, false))
}

pub fn select_rois(rois: &[RoiFeature], cfg: &SelectionConfig) -> Result<Selection> {
    let (indices, truncated) = select_indices(rois, cfg)?;
    Ok(Selection {
        rois: indices.iter().map(|&i| rois[i].clone()).collect(),
        indices,
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDiversity {
    pub method: SelectionMethod,
    pub n_selected: usize,
    #[serde(flatten)]
    pub report: DiversityReport,
}

/// Runs every selection method on the same RoIs and scores the diversity of each pick.
pub fn selection_report(rois: &[RoiFeature], cfg: &SelectionConfig) -> Result<Vec<MethodDiversity>> {
    selection_report_with_bins(rois, cfg, DEFAULT_BINS)
}

pub fn selection_report_with_bins(rois: &[RoiFeature], cfg: &SelectionConfig, bins: usize) -> Result<Vec<MethodDiversity>> {
    SelectionMethod::ALL
        .into_iter()
        .map(|method| {
            let sel = select_rois(rois, &SelectionConfig { method, ..*cfg })?;
            let vectors: Vec<Vec<f64>> = to_points(&sel.rois);
            Ok(MethodDiversity {
                method,
                n_selected: sel.rois.len(),
                report: analyze(&vectors, bins)?,
            })
        })
        .collect()
}
