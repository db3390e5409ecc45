//! Dense row-major frame matrices and the `SEFM` binary feature format.
//!
//! Layout (little-endian): magic `SEFM`, format version `u32`, row count `u64`,
//! dimension `u32`, then `rows * dim` `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SEFM";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// A `T x d` sequence of frame vectors. Always non-empty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f32>, rows: usize, dim: usize) -> Result<Self> {
        if rows == 0 {
            return Err(Error::validation("frames", "matrix must have at least one row"));
        }
        if dim == 0 {
            return Err(Error::validation("dim", "dimension must be at least 1"));
        }
        if data.len() != rows * dim {
            return Err(Error::validation(
                "frames",
                format!("expected {} values for {rows}x{dim}, got {}", rows * dim, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                "frames",
                format!("non-finite value at row {} column {}", pos / dim, pos % dim),
            ));
        }
        Ok(Self { rows, dim, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                    context: format!("row {i}"),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(data, rows.len(), dim)
    }

    /// Vertically stacks matrices of equal dimension.
    pub fn concat<'a, I>(parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureMatrix>,
    {
        let mut dim = None;
        let mut rows = 0;
        let mut data = Vec::new();
        for part in parts {
            match dim {
                None => dim = Some(part.dim),
                Some(d) if d != part.dim => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        actual: part.dim,
                        context: "concatenation".into(),
                    })
                }
                _ => {}
            }
            rows += part.rows;
            data.extend_from_slice(&part.data);
        }
        Self::new(data, rows, dim.unwrap_or(0))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Serializes to the `SEFM` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the `SEFM` byte layout; `origin` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(origin, "truncated header"));
        }
        if &bytes[0..4] != FEATURE_MAGIC {
            return Err(Error::format(origin, "bad magic, expected SEFM"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::format(origin, "header sizes overflow"))?;
        if bytes.len() != expected {
            return Err(Error::format(
                origin,
                format!("expected {expected} bytes for {rows}x{dim}, found {}", bytes.len()),
            ));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(data, rows, dim).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Reads only the `(rows, dim)` header fields.
    pub fn peek_shape(bytes: &[u8], origin: &Path) -> Result<(usize, usize)> {
        if bytes.len() < HEADER_LEN || &bytes[0..4] != FEATURE_MAGIC {
            return Err(Error::format(origin, "bad magic, expected SEFM"));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        Ok((rows, dim))
    }
}

/// Squared Euclidean distance accumulated in `f64`.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Cosine similarity; `None` when either operand has zero norm.
#[inline]
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na.sqrt() * nb.sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(FeatureMatrix::new(vec![1.0, f32::NAN], 1, 2).is_err());
        assert!(FeatureMatrix::new(vec![], 0, 4).is_err());
        assert!(FeatureMatrix::new(vec![1.0; 3], 1, 2).is_err());
    }

    #[test]
    fn bytes_round_trip_and_corruption() {
        let m = FeatureMatrix::new(vec![0.5, -1.25, 3.0, 7.0, 1e-7, -0.0], 3, 2).unwrap();
        let bytes = m.to_bytes();
        let back = FeatureMatrix::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            FeatureMatrix::from_bytes(&bad, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        assert!(FeatureMatrix::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    #[test]
    fn concat_checks_dims() {
        let a = FeatureMatrix::new(vec![1.0, 2.0], 1, 2).unwrap();
        let b = FeatureMatrix::new(vec![1.0, 2.0, 3.0], 1, 3).unwrap();
        assert!(FeatureMatrix::concat([&a, &b]).is_err());
        let c = FeatureMatrix::concat([&a, &a]).unwrap();
        assert_eq!(c.rows(), 2);
    }

    #[test]
    fn cosine_zero_norm() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert!((cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap()).abs() < 1e-15);
    }
}
