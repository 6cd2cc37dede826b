//! The `ARTF` tensor interchange format and the in-memory feature containers.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | field                               |
//! |------------|-------------------------------------|
//! | 4          | magic `b"ARTF"`                     |
//! | 4          | version `u32`, currently 1          |
//! | 1          | rank `u8`                           |
//! | 4 * rank   | dims, one `u32` each, outermost first |
//! | 1          | dtype `u8` (0 = `f32`)              |
//! | 4 * numel  | payload, `f32` row-major            |
//!
//! Frame feature sequences are rank 4 with dims `[T, H', W', D]`, so the payload order is
//! `(t, y, x, d)`. Weight matrices are rank 2 `[rows, cols]`, biases rank 1.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ARTF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Input image side length fed to the visual encoder.
pub const DEFAULT_RESOLUTION: usize = 224;
/// Patch stride of the encoder (ViT-L/14).
pub const DEFAULT_STRIDE: usize = 14;
/// Side of the feature grid, `224 / 14`.
pub const DEFAULT_GRID: usize = DEFAULT_RESOLUTION / DEFAULT_STRIDE;
/// Encoder feature dimensionality.
pub const DEFAULT_DIM: usize = 1024;
/// Number of video tokens (spatial plus temporal) in the prompt.
pub const DEFAULT_VIDEO_TOKENS: usize = 356;
/// Sampled frames: the video tokens minus the 16x16 spatial grid.
pub const DEFAULT_FRAMES: usize = DEFAULT_VIDEO_TOKENS - DEFAULT_GRID * DEFAULT_GRID;

pub fn header_len(rank: usize) -> usize {
    4 + 4 + 1 + 4 * rank + 1
}

/// A raw dense `f32` tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} imply {numel} elements, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::ShapeMismatch(format!("dims {dims:?} not encodable")));
        }
        Ok(Self { dims, data })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(header_len(self.rank()) + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.rank() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let short = |expected| Error::PayloadSize {
            expected,
            actual: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(short(header_len(0)));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        if bytes.len() < 9 {
            return Err(short(header_len(0)));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let rank = bytes[8] as usize;
        let hlen = header_len(rank);
        if bytes.len() < hlen {
            return Err(short(hlen));
        }
        let dims: Vec<usize> = bytes[9..9 + 4 * rank]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let dtype = bytes[hlen - 1];
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ShapeMismatch(format!("dims {dims:?} overflow")))?;
        let expected = hlen + 4 * numel;
        if bytes.len() != expected {
            return Err(short(expected));
        }
        let mut data = Vec::with_capacity(numel);
        for (index, c) in bytes[hlen..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            data.push(v);
        }
        Ok(Self { dims, data })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Dense per-frame feature maps, stored `(t, y, x, d)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    t_count: usize,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FrameFeatureSequence {
    pub fn new(t_count: usize, grid_h: usize, grid_w: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let numel = t_count * grid_h * grid_w * dim;
        if data.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "sequence {t_count}x{grid_h}x{grid_w}x{dim} needs {numel} values, got {}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            t_count,
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    /// Fills every element from `f(t, y, x, d)`.
    pub fn from_fn(
        t_count: usize,
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(t_count * grid_h * grid_w * dim);
        for t in 0..t_count {
            for y in 0..grid_h {
                for x in 0..grid_w {
                    for d in 0..dim {
                        data.push(f(t, y, x, d));
                    }
                }
            }
        }
        Self::new(t_count, grid_h, grid_w, dim, data)
    }

    pub fn t_count(&self) -> usize {
        self.t_count
    }
    pub fn grid_h(&self) -> usize {
        self.grid_h
    }
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.grid_h * self.grid_w * self.dim
    }

    pub fn get(&self, t: usize, y: usize, x: usize, d: usize) -> f32 {
        self.data[((t * self.grid_h + y) * self.grid_w + x) * self.dim + d]
    }

    /// Borrowed view of frame `t`.
    pub fn slice_frame(&self, t: usize) -> Result<FeatureMap<'_>> {
        if t >= self.t_count {
            return Err(Error::OutOfRange {
                index: t,
                len: self.t_count,
            });
        }
        let n = self.frame_len();
        Ok(FeatureMap {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            dim: self.dim,
            data: &self.data[t * n..(t + 1) * n],
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.t_count, self.grid_h, self.grid_w, self.dim],
            data: self.data.clone(),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::try_from(read_tensor(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(&self.to_tensor(), path)
    }
}

impl TryFrom<Tensor> for FrameFeatureSequence {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match t.dims[..] {
            [tc, h, w, d] => Self::new(tc, h, w, d, t.data),
            _ => Err(Error::ShapeMismatch(format!(
                "frame features must be rank 4 [T, H, W, D], got dims {:?}",
                t.dims
            ))),
        }
    }
}

/// One frame's `H' x W' x D` feature map, stored `(y, x, d)`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap<'a> {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    data: &'a [f32],
}

impl<'a> FeatureMap<'a> {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, data: &'a [f32]) -> Result<Self> {
        if data.len() != grid_h * grid_w * dim {
            return Err(Error::ShapeMismatch(format!(
                "map {grid_h}x{grid_w}x{dim} needs {} values, got {}",
                grid_h * grid_w * dim,
                data.len()
            )));
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn data(&self) -> &'a [f32] {
        self.data
    }

    /// Feature vector of cell `(y, x)`.
    pub fn cell(&self, y: usize, x: usize) -> &'a [f32] {
        let start = (y * self.grid_w + x) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Affine projection parameters: `out = in · W + b` with `W` of shape `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "bias length {} does not match {cols} columns",
                    b.len()
                )));
            }
            check_finite(b)?;
        }
        check_finite(&data)?;
        Ok(Self {
            rows,
            cols,
            data,
            bias,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            bias: Some(vec![0.0; cols]),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            rows: n,
            cols: n,
            data,
            bias: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Reads a rank-2 weight file and an optional rank-1 bias file.
    pub fn read(weights: impl AsRef<Path>, bias: Option<&Path>) -> Result<Self> {
        let w = read_tensor(weights)?;
        let [rows, cols] = w.dims[..] else {
            return Err(Error::ShapeMismatch(format!(
                "weight matrix must be rank 2, got dims {:?}",
                w.dims
            )));
        };
        let bias = match bias {
            Some(p) => {
                let b = read_tensor(p)?;
                if b.rank() != 1 {
                    return Err(Error::ShapeMismatch(format!(
                        "bias must be rank 1, got dims {:?}",
                        b.dims
                    )));
                }
                Some(b.data)
            }
            None => None,
        };
        Self::new(rows, cols, w.data, bias)
    }

    pub fn write(&self, weights: impl AsRef<Path>, bias: Option<&Path>) -> Result<()> {
        write_tensor(
            &Tensor {
                dims: vec![self.rows, self.cols],
                data: self.data.clone(),
            },
            weights,
        )?;
        if let (Some(p), Some(b)) = (bias, &self.bias) {
            write_tensor(
                &Tensor {
                    dims: vec![b.len()],
                    data: b.clone(),
                },
                p,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn consecutive(t: usize, h: usize, w: usize, d: usize) -> FrameFeatureSequence {
        let n = t * h * w * d;
        FrameFeatureSequence::new(t, h, w, d, (0..n).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn defaults_follow_geometry() {
        assert_eq!(DEFAULT_GRID, 16);
        assert_eq!(DEFAULT_FRAMES, 100);
    }

    #[test]
    fn round_trip_consecutive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seq.artf");
        let seq = consecutive(2, 2, 2, 3);
        seq.write(&p).unwrap();
        let back = FrameFeatureSequence::read(&p).unwrap();
        assert_eq!(back, seq);
        let len = std::fs::metadata(&p).unwrap().len() as usize;
        assert_eq!(len, header_len(4) + 4 * 24);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = consecutive(1, 1, 1, 2).to_tensor().encode();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            Tensor::decode(&bytes),
            Err(Error::BadMagic { found }) if &found == b"XXXX"
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = consecutive(2, 2, 2, 3).to_tensor().encode();
        // 4-dim header is 26 bytes, payload 96 bytes; drop the last value
        let cut = &bytes[..bytes.len() - 4];
        match Tensor::decode(cut) {
            Err(Error::PayloadSize { expected, actual }) => {
                assert_eq!(expected, 26 + 96);
                assert_eq!(actual, 26 + 92);
            }
            other => panic!("unexpected {other:?}"),
        }
        // trailing garbage is rejected as well
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Tensor::decode(&long), Err(Error::PayloadSize { .. })));
    }

    #[test]
    fn header_field_errors() {
        let mut bytes = consecutive(1, 1, 1, 1).to_tensor().encode();
        bytes[4] = 2;
        assert!(matches!(Tensor::decode(&bytes), Err(Error::UnsupportedVersion(2))));
        let mut bytes = consecutive(1, 1, 1, 1).to_tensor().encode();
        let dtype_at = header_len(4) - 1;
        bytes[dtype_at] = 7;
        assert!(matches!(Tensor::decode(&bytes), Err(Error::UnsupportedDtype(7))));
    }

    #[test]
    fn non_finite_rejected() {
        let t = Tensor {
            dims: vec![3],
            data: vec![1.0, f32::NAN, 2.0],
        };
        assert!(matches!(Tensor::decode(&t.encode()), Err(Error::NonFinite { index: 1 })));
        assert!(FrameFeatureSequence::new(1, 1, 1, 1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn slice_frame_examples() {
        let one = consecutive(1, 2, 3, 2);
        assert_eq!(one.slice_frame(0).unwrap().data(), one.data());
        assert!(matches!(one.slice_frame(1), Err(Error::OutOfRange { index: 1, len: 1 })));
        let seq = consecutive(3, 2, 3, 2);
        let f1 = seq.slice_frame(1).unwrap();
        assert_eq!(f1.data()[0], (2 * 3 * 2) as f32);
        assert_eq!(f1.cell(1, 2), &[22.0, 23.0][..]);
    }

    #[test]
    fn weights_round_trip_with_bias() {
        let dir = tempfile::tempdir().unwrap();
        let (wp, bp) = (dir.path().join("w.artf"), dir.path().join("b.artf"));
        let w = WeightMatrix::new(2, 3, vec![1., 2., 3., 4., 5., 6.], Some(vec![0.5, -1., 2.])).unwrap();
        w.write(&wp, Some(&bp)).unwrap();
        assert_eq!(WeightMatrix::read(&wp, Some(&bp)).unwrap(), w);
        assert!(WeightMatrix::new(2, 2, vec![0.; 4], Some(vec![0.; 3])).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            dims in prop::collection::vec(1usize..=8, 0..=4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 11) as f32) * 1e-9 - 3.0)
                .collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let bytes = t.encode();
            prop_assert_eq!(bytes.len(), header_len(dims.len()) + 4 * n);
            let back = Tensor::decode(&bytes).unwrap();
            prop_assert_eq!(back.dims, t.dims);
            let same_bits = back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
        }
    }
}
