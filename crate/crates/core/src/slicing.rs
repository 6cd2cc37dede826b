//! Spatial and temporal slices of a frame feature sequence, plus the projections that map
//! visual vectors into the language embedding space.
//!
//! Pooling accumulates in `f64` and stores `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FrameFeatureSequence, Tensor, WeightMatrix};

/// Time-averaged features, one `D`-vector per grid cell, stored `(y, x, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatures {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl SpatialFeatures {
    pub fn token_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.grid_h, self.grid_w, self.dim],
            data: self.data.clone(),
        }
    }
}

/// Space-averaged features, one `D`-vector per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFeatures {
    pub t_count: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl TemporalFeatures {
    pub fn token(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.t_count, self.dim],
            data: self.data.clone(),
        }
    }
}

/// Mean over the time axis.
pub fn spatial_pool(seq: &FrameFeatureSequence) -> Result<SpatialFeatures> {
    if seq.t_count() == 0 {
        return Err(Error::Empty("frame sequence has no frames"));
    }
    let n = seq.frame_len();
    let mut acc = vec![0.0f64; n];
    for frame in seq.data().chunks_exact(n) {
        for (a, &v) in acc.iter_mut().zip(frame) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / seq.t_count() as f64;
    Ok(SpatialFeatures {
        grid_h: seq.grid_h(),
        grid_w: seq.grid_w(),
        dim: seq.dim(),
        data: acc.into_iter().map(|a| (a * inv) as f32).collect(),
    })
}

/// Mean over the spatial plane.
pub fn temporal_pool(seq: &FrameFeatureSequence) -> Result<TemporalFeatures> {
    let cells = seq.grid_h() * seq.grid_w();
    if cells == 0 {
        return Err(Error::Empty("feature grid has no cells"));
    }
    let dim = seq.dim();
    let inv = 1.0 / cells as f64;
    let mut data = Vec::with_capacity(seq.t_count() * dim);
    if seq.frame_len() > 0 {
        for frame in seq.data().chunks_exact(seq.frame_len()) {
            let mut acc = vec![0.0f64; dim];
            for cell in frame.chunks_exact(dim) {
                for (a, &v) in acc.iter_mut().zip(cell) {
                    *a += v as f64;
                }
            }
            data.extend(acc.into_iter().map(|a| (a * inv) as f32));
        }
    }
    Ok(TemporalFeatures {
        t_count: seq.t_count(),
        dim,
        data,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact (erf-based) GELU.
    #[default]
    Gelu,
    Relu,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }
}

fn affine(v: &[f64], w: &WeightMatrix) -> Result<Vec<f64>> {
    if v.len() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "input length {} does not match weight rows {}",
            v.len(),
            w.rows()
        )));
    }
    let mut out: Vec<f64> = match w.bias() {
        Some(b) => b.iter().map(|&x| x as f64).collect(),
        None => vec![0.0; w.cols()],
    };
    for (row, &x) in w.data().chunks_exact(w.cols()).zip(v) {
        if x == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += x * wv as f64;
        }
    }
    Ok(out)
}

/// Single affine map `v · W + b`.
pub fn linear_project(v: &[f32], w: &WeightMatrix) -> Result<Vec<f32>> {
    let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    Ok(affine(&v, w)?.into_iter().map(|x| x as f32).collect())
}

/// Two-layer MLP `act(v · W1 + b1) · W2 + b2`.
pub fn mlp_project(
    v: &[f32],
    w1: &WeightMatrix,
    w2: &WeightMatrix,
    activation: Activation,
) -> Result<Vec<f32>> {
    if w1.cols() != w2.rows() {
        return Err(Error::ShapeMismatch(format!(
            "hidden width {} does not match second layer rows {}",
            w1.cols(),
            w2.rows()
        )));
    }
    let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let hidden: Vec<f64> = affine(&v, w1)?
        .into_iter()
        .map(|h| activation.apply(h))
        .collect();
    Ok(affine(&hidden, w2)?.into_iter().map(|x| x as f32).collect())
}

/// The visual-token projector: MLP for video tokens, a single linear map for region tokens.
#[derive(Debug, Clone)]
pub struct Projector {
    pub mlp: (WeightMatrix, WeightMatrix),
    pub activation: Activation,
    pub region: WeightMatrix,
}

impl Projector {
    pub fn project_video_token(&self, v: &[f32]) -> Result<Vec<f32>> {
        mlp_project(v, &self.mlp.0, &self.mlp.1, self.activation)
    }

    pub fn project_region_token(&self, v: &[f32]) -> Result<Vec<f32>> {
        linear_project(v, &self.region)
    }
}
