//! Embedding matrices and their on-disk EMB1 format.
//!
//! An EMB1 file is a 17-byte header followed by a row-major float32 payload:
//!
//! ```text
//! "EMB1" | version: u32 = 1 | rows: u32 | dim: u32 | dtype: u8 = 0 | rows*dim f32
//! ```
//!
//! All integers and floats are little-endian. Every file has a JSON sidecar at
//! `<path>.manifest.json` describing which space and modality it holds.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::{put_f32, put_u32, to_u32, Reader};
use crate::error::{Error, Result};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_VERSION: u32 = 1;
pub const EMB1_HEADER_LEN: usize = 17;
const DTYPE_F32: u8 = 0;

/// Tolerance on row norms for matrices flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-5;
/// Rows with a norm below this cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// A dense `rows x dim` matrix of float32 embeddings, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Builds a matrix from row-major data. Rejects empty shapes, length
    /// mismatches and non-finite values.
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "matrix must be non-empty, got {rows}x{dim}"
            )));
        }
        let expected = rows
            .checked_mul(dim)
            .ok_or_else(|| Error::Shape(format!("{rows}x{dim} overflows")))?;
        if data.len() != expected {
            return Err(Error::PayloadLength {
                expected: expected * 4,
                found: data.len() * 4,
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: idx / dim,
                col: idx % dim,
            });
        }
        Ok(Self {
            rows,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Shape(format!(
                "row {bad} has {} columns, expected {dim}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    /// Rounds an f64 array to float32.
    pub fn from_array(a: &Array2<f64>) -> Result<Self> {
        let (rows, dim) = a.dim();
        Self::new(rows, dim, a.iter().map(|&v| v as f32).collect())
    }

    /// Marks the matrix normalized after checking every row norm.
    pub fn into_normalized(mut self) -> Result<Self> {
        self.check_unit_rows()?;
        self.normalized = true;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.dim), |(i, j)| {
            self.data[i * self.dim + j] as f64
        })
    }

    /// Copies a subset of rows, keeping the normalized flag.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Shape(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut out = Self::new(indices.len(), self.dim, data)?;
        out.normalized = self.normalized;
        Ok(out)
    }

    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let idx: Vec<usize> = range.collect();
        self.select_rows(&idx)
    }

    fn check_unit_rows(&self) -> Result<()> {
        for i in 0..self.rows {
            let norm = row_norm(self.row(i));
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::NotNormalized { row: i, norm });
            }
        }
        Ok(())
    }

    pub(crate) fn require_normalized(&self, what: &str) -> Result<()> {
        if !self.normalized {
            return Err(Error::Invalid(format!("{what} must be unit-normalized")));
        }
        Ok(())
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceManifest {
    pub space_id: String,
    pub modality: String,
    pub rows: usize,
    pub dim: usize,
    pub normalized: bool,
    pub source_note: String,
}

impl SpaceManifest {
    pub fn for_matrix(
        space_id: impl Into<String>,
        modality: impl Into<String>,
        m: &EmbeddingMatrix,
        source_note: impl Into<String>,
    ) -> Self {
        Self {
            space_id: space_id.into(),
            modality: modality.into(),
            rows: m.rows(),
            dim: m.dim(),
            normalized: m.is_normalized(),
            source_note: source_note.into(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }

    fn check_against(&self, m: &EmbeddingMatrix) -> Result<()> {
        if self.rows != m.rows() || self.dim != m.dim() {
            return Err(Error::Manifest(format!(
                "manifest says {}x{}, file header says {}x{}",
                self.rows,
                self.dim,
                m.rows(),
                m.dim()
            )));
        }
        Ok(())
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Encodes a matrix as an EMB1 byte buffer.
pub fn encode_emb1(m: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(EMB1_HEADER_LEN + m.data.len() * 4);
    write_emb1(&mut out, m)?;
    Ok(out)
}

pub(crate) fn write_emb1(out: &mut Vec<u8>, m: &EmbeddingMatrix) -> Result<()> {
    out.extend_from_slice(EMB1_MAGIC);
    put_u32(out, EMB1_VERSION);
    put_u32(out, to_u32(m.rows, "rows")?);
    put_u32(out, to_u32(m.dim, "dim")?);
    out.push(DTYPE_F32);
    for &v in &m.data {
        put_f32(out, v);
    }
    Ok(())
}

/// Decodes a complete EMB1 buffer. Trailing or missing payload bytes are
/// an error. The returned matrix is not flagged as normalized; the manifest
/// decides that.
pub fn decode_emb1(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut r = Reader::new(bytes);
    let (rows, dim) = read_emb1_header(&mut r)?;
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Shape(format!("{rows}x{dim} overflows")))?;
    if r.remaining() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: r.remaining(),
        });
    }
    let data = r.f32_vec(rows * dim)?;
    EmbeddingMatrix::new(rows, dim, data)
}

/// Reads one EMB1 block from the middle of a larger container.
pub(crate) fn read_emb1_block(r: &mut Reader<'_>) -> Result<EmbeddingMatrix> {
    let (rows, dim) = read_emb1_header(r)?;
    let n = rows
        .checked_mul(dim)
        .ok_or_else(|| Error::Shape(format!("{rows}x{dim} overflows")))?;
    if n.checked_mul(4).is_none_or(|b| b > r.remaining()) {
        return Err(Error::PayloadLength {
            expected: n.saturating_mul(4),
            found: r.remaining(),
        });
    }
    let data = r.f32_vec(n)?;
    EmbeddingMatrix::new(rows, dim, data)
}

fn read_emb1_header(r: &mut Reader<'_>) -> Result<(usize, usize)> {
    r.magic(EMB1_MAGIC)?;
    let version = r.u32()?;
    if version != EMB1_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    if rows == 0 || dim == 0 {
        return Err(Error::Shape(format!(
            "matrix must be non-empty, got {rows}x{dim}"
        )));
    }
    Ok((rows, dim))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(EmbeddingMatrix, SpaceManifest)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = SpaceManifest::parse(&text)?;
    let matrix = decode_emb1(&bytes)?;
    manifest.check_against(&matrix)?;
    let matrix = if manifest.normalized {
        matrix.into_normalized()?
    } else {
        matrix
    };
    Ok((matrix, manifest))
}

pub fn save_embeddings(
    matrix: &EmbeddingMatrix,
    manifest: &SpaceManifest,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    manifest.check_against(matrix)?;
    if manifest.normalized != matrix.normalized {
        return Err(Error::Manifest(format!(
            "manifest normalized={} but matrix normalized={}",
            manifest.normalized, matrix.normalized
        )));
    }
    let bytes = encode_emb1(matrix)?;
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(matrix.data.len());
    for i in 0..matrix.rows {
        let row = matrix.row(i);
        let norm = row_norm(row);
        if norm < MIN_ROW_NORM {
            return Err(Error::ZeroNorm(i));
        }
        data.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
    }
    Ok(EmbeddingMatrix {
        rows: matrix.rows,
        dim: matrix.dim,
        data,
        normalized: true,
    })
}

/// Dense `queries.rows x gallery.rows` matrix of dot products between
/// normalized rows.
pub fn cosine_similarity(
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
) -> Result<Array2<f64>> {
    if queries.dim != gallery.dim {
        return Err(Error::Shape(format!(
            "query dim {} != gallery dim {}",
            queries.dim, gallery.dim
        )));
    }
    queries.require_normalized("queries")?;
    gallery.require_normalized("gallery")?;
    Ok(queries.to_array().dot(&gallery.to_array().t()))
}
