//! Dense feature vectors keyed by id, their binary file format, and the
//! similarity primitives shared by the sampler, models and evaluator.
//!
//! File layout (all integers little-endian):
//!
//! | field   | type                              |
//! |---------|-----------------------------------|
//! | magic   | `b"VGSE"`                         |
//! | version | u32, always 1                     |
//! | dim     | u32                               |
//! | count   | u64                               |
//! | ids     | `count` × (u16 length + UTF-8)    |
//! | rows    | `count·dim` × f32, row-major      |

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VGSE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidEmbeddings("dim must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::InvalidEmbeddings(format!(
                "{} ids but {} values for dim {dim}",
                ids.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbeddings(format!(
                "non-finite value in row {}",
                pos / dim
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.len() > u16::MAX as usize {
                return Err(Error::InvalidEmbeddings(format!("id too long in row {i}")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidEmbeddings(format!("duplicate id {id:?}")));
            }
        }
        Ok(EmbeddingMatrix { dim, ids, data, index })
    }

    pub fn from_rows(dim: usize, rows: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, row) in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: row.len() });
            }
            ids.push(id);
            data.extend_from_slice(&row);
        }
        Self::new(dim, ids, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn require(&self, id: &str) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.data.chunks_exact(self.dim))
    }

    /// Exact size in bytes of the encoded file.
    pub fn encoded_len(&self) -> usize {
        4 + 4 + 4 + 8
            + self.ids.iter().map(|id| 2 + id.len()).sum::<usize>()
            + self.data.len() * 4
    }

    pub fn encode(&self, out: &mut impl Write) -> std::io::Result<usize> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for id in &self.ids {
            out.write_all(&(id.len() as u16).to_le_bytes())?;
            out.write_all(id.as_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.dim * 4);
        for row in self.data.chunks_exact(self.dim) {
            buf.clear();
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(self.encoded_len())
    }

    pub fn decode(input: &mut impl Read) -> Result<Self> {
        let bad = |m: String| Error::InvalidEmbeddings(m);
        let mut header = [0u8; 20];
        input
            .read_exact(&mut header)
            .map_err(|_| bad("truncated header".into()))?;
        if &header[0..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(bad("dim must be positive".into()));
        }
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let mut len = [0u8; 2];
            input
                .read_exact(&mut len)
                .map_err(|_| bad(format!("truncated id table at id {i}")))?;
            let mut raw = vec![0u8; u16::from_le_bytes(len) as usize];
            input
                .read_exact(&mut raw)
                .map_err(|_| bad(format!("truncated id table at id {i}")))?;
            ids.push(String::from_utf8(raw).map_err(|_| bad(format!("id {i} is not UTF-8")))?);
        }
        let mut data = Vec::with_capacity(count.saturating_mul(dim).min(1 << 26));
        let mut raw = vec![0u8; dim * 4];
        for r in 0..count {
            input
                .read_exact(&mut raw)
                .map_err(|_| bad(format!("truncated payload at row {r}")))?;
            for chunk in raw.chunks_exact(4) {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(bad(format!("non-finite value in row {r}")));
                }
                data.push(v);
            }
        }
        Self::new(dim, ids, data)
    }
}

pub fn write_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let n = matrix.encode(&mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(n)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::decode(&mut std::io::BufReader::new(file))
}

// Vector primitives. Storage is f32; every reduction accumulates in f64.

pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
}

pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

pub fn squared_distance(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| {
            let d = f64::from(*a) - f64::from(*b);
            d * d
        })
        .sum()
}

/// Scale `v` to unit length. Zero vectors are an error.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm("l2_normalize"));
    }
    Ok(v.iter().map(|x| (f64::from(*x) / n) as f32).collect())
}

pub fn l2_normalize_f64(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm("l2_normalize"));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), actual: v.len() });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}
