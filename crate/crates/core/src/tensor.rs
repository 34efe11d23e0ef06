//! DST tensor files.
//!
//! Layout (little-endian): magic `DST1`, one `u8` with the number of
//! dimensions, one `u32` per dimension, then the `f32` payload in row-major
//! order. Nothing follows the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DST1";

/// Largest element count accepted when decoding a header.
pub const MAX_ELEMENTS: usize = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let count = element_count(&dims)?;
        if count != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} describe {} elements but {} were given",
                dims,
                count,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.is_empty() || self.dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!(
                "unsupported rank {}",
                self.dims.len()
            )));
        }
        element_count(&self.dims)?;
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at element {i}")));
        }
        let mut out = Vec::with_capacity(5 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Capacity(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing DST1 magic".into()));
        }
        let ndim = bytes[4] as usize;
        if ndim == 0 {
            return Err(Error::Format("rank 0 tensor".into()));
        }
        let header_len = 5 + 4 * ndim;
        if bytes.len() < header_len {
            return Err(Error::Format("truncated header".into()));
        }
        let dims: Vec<usize> = bytes[5..header_len]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count = element_count(&dims)?;
        let expected = count
            .checked_mul(4)
            .and_then(|p| p.checked_add(header_len))
            .ok_or_else(|| Error::Capacity(format!("dims {dims:?} overflow")))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header {:?} requires {}",
                bytes.len() - header_len,
                dims,
                expected - header_len
            )));
        }
        let data: Vec<f32> = bytes[header_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at element {i}")));
        }
        Ok(Tensor { dims, data })
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::Format("tensor has no dimensions".into()));
    }
    if dims.contains(&0) {
        return Err(Error::Format(format!("zero-sized dimension in {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Capacity(format!("dims {dims:?} overflow")))?;
    if count > MAX_ELEMENTS {
        return Err(Error::Capacity(format!(
            "{count} elements exceeds limit {MAX_ELEMENTS}"
        )));
    }
    Ok(count)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = tensor.encode()?;
    let tmp = path.with_extension("dst.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Per-patch features dumped by the extractor, one row per patch in
/// row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub n_patches: usize,
    pub dim: usize,
    /// `(n_height, n_width)`; `None` when the file only carried `(rows, dim)`.
    pub grid: Option<(usize, usize)>,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match t.dims.as_slice() {
            &[n, d] => Ok(FeatureMap {
                n_patches: n,
                dim: d,
                grid: None,
                values: t.data,
            }),
            &[h, w, d] => Ok(FeatureMap {
                n_patches: h * w,
                dim: d,
                grid: Some((h, w)),
                values: t.data,
            }),
            dims => Err(Error::Format(format!(
                "feature tensor must be 2-D or 3-D, got {dims:?}"
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Attaches (or checks) the patch grid the features were computed on.
    pub fn with_grid(mut self, n_h: usize, n_w: usize) -> Result<Self> {
        if n_h * n_w != self.n_patches {
            return Err(Error::Shape(format!(
                "{} feature rows do not fit a {}x{} patch grid",
                self.n_patches, n_h, n_w
            )));
        }
        if let Some(g) = self.grid {
            if g != (n_h, n_w) {
                return Err(Error::Shape(format!(
                    "feature grid {g:?} differs from image grid ({n_h}, {n_w})"
                )));
            }
        }
        self.grid = Some((n_h, n_w));
        Ok(self)
    }
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    FeatureMap::from_tensor(read_tensor(path)?)
}
