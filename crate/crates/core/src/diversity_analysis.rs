//! Entropy and inter-frame difference statistics over sets of RoI vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `1 - cos(a, b)`, in `[0, 2]`.
    #[default]
    Cosine,
    L2,
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Distance::Cosine),
            "l2" => Ok(Distance::L2),
            _ => Err(Error::InvalidArgument(format!("unknown distance {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub entropy_bits: f64,
    pub consecutive_diversity: f64,
    pub pairwise_diversity: f64,
    pub n_rois: usize,
}

fn check_vectors(vectors: &[Vec<f64>]) -> Result<usize> {
    let first = vectors.first().ok_or(Error::Empty("no vectors"))?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::InvalidArgument("vectors have zero length".into()));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch(format!("vector of length {} among length {dim}", v.len())));
    }
    if let Some(i) = vectors.iter().flatten().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    Ok(dim)
}

/// Bin index of `v` among `bins` equal-width bins spanning `[lo, hi]`.
fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let b = ((v - lo) / (hi - lo) * bins as f64).floor() as usize;
    b.min(bins - 1)
}

fn shannon_bits(counts: &[usize], total: usize) -> f64 {
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Mean over dimensions of the Shannon entropy (bits) of each dimension's histogram.
pub fn feature_entropy(vectors: &[Vec<f64>], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("bins must be >= 2, got {bins}")));
    }
    let dim = check_vectors(vectors)?;
    let mut counts = vec![0usize; bins];
    let mut total = 0.0;
    for d in 0..dim {
        let (lo, hi) = vectors
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[d]), hi.max(v[d])));
        counts.iter_mut().for_each(|c| *c = 0);
        for v in vectors {
            counts[bin_of(v[d], lo, hi, bins)] += 1;
        }
        total += shannon_bits(&counts, vectors.len());
    }
    Ok(total / dim as f64)
}

fn pair_distance(a: &[f64], b: &[f64], distance: Distance) -> Result<f64> {
    match distance {
        Distance::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(Error::DegenerateVector);
            }
            let cos = (dot / (na * nb).sqrt()).clamp(-1.0, 1.0);
            Ok(1.0 - cos)
        }
        Distance::L2 => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
    }
}

/// `(consecutive, pairwise)` mean distances; both 0 with fewer than two vectors.
pub fn inter_frame_diversity(vectors: &[Vec<f64>]) -> Result<(f64, f64)> {
    inter_frame_diversity_with(vectors, Distance::Cosine)
}

pub fn inter_frame_diversity_with(vectors: &[Vec<f64>], distance: Distance) -> Result<(f64, f64)> {
    if vectors.len() < 2 {
        return Ok((0.0, 0.0));
    }
    check_vectors(vectors)?;
    let n = vectors.len();
    let mut consecutive = 0.0;
    for w in vectors.windows(2) {
        consecutive += pair_distance(&w[0], &w[1], distance)?;
    }
    let mut pairwise = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            pairwise += pair_distance(&vectors[i], &vectors[j], distance)?;
        }
    }
    Ok((consecutive / (n - 1) as f64, pairwise / (n * (n - 1) / 2) as f64))
}

/// Relative entropy change in percent when going from `base` to `augmented`.
pub fn entropy_gain(base: &[Vec<f64>], augmented: &[Vec<f64>], bins: usize) -> Result<f64> {
    let b = feature_entropy(base, bins)?;
    let a = feature_entropy(augmented, bins)?;
    if b == 0.0 {
        return Err(Error::ZeroBaseEntropy);
    }
    Ok(percent_change(b, a))
}

pub fn percent_change(base: f64, augmented: f64) -> f64 {
    100.0 * (augmented - base) / base
}

pub fn analyze(vectors: &[Vec<f64>], bins: usize) -> Result<DiversityReport> {
    analyze_with(vectors, bins, Distance::Cosine)
}

pub fn analyze_with(vectors: &[Vec<f64>], bins: usize, distance: Distance) -> Result<DiversityReport> {
    let entropy_bits = feature_entropy(vectors, bins)?;
    let (consecutive_diversity, pairwise_diversity) = inter_frame_diversity_with(vectors, distance)?;
    Ok(DiversityReport {
        entropy_bits,
        consecutive_diversity,
        pairwise_diversity,
        n_rois: vectors.len(),
    })
}
