//! Named float tensors: the unit of model exchange, aggregation and checkpointing.
//!
//! A [`TensorMap`] is an ordered list of named, row-major `f32` tensors. All
//! arithmetic that crosses node boundaries (weighted aggregation, distances)
//! runs in `f64` with a fixed accumulation order so results are reproducible
//! bit-for-bit regardless of the order updates arrived in.
//!
//! The byte encoding (`FTM1`) is shared by the wire protocol and checkpoints:
//!
//! ```text
//! "FTM1" | u32 BE entry count | entries...
//! entry: u16 BE name length | UTF-8 name | u8 rank | rank x u32 BE dims | f32 LE data
//! ```

use std::collections::HashSet;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FTM1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("empty update set")]
    EmptyUpdateSet,
    #[error("non-finite value in tensor `{0}`")]
    NonFiniteInput(String),
    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
}

/// A single named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let name = name.into();
        if shape.contains(&0) {
            return Err(TensorError::InvalidTensor {
                name,
                reason: "dimensions must be positive".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::InvalidTensor {
                reason: format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
                name,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteInput(name));
        }
        Ok(Self { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Result<Self, TensorError> {
        let len = shape.iter().product();
        Self::new(name, shape, vec![0.0; len])
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: Vec<Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<Tensor>) -> Result<Self, TensorError> {
        let mut map = Self::new();
        for t in entries {
            map.push(t)?;
        }
        Ok(map)
    }

    /// Appends a tensor, rejecting duplicate names.
    pub fn push(&mut self, tensor: Tensor) -> Result<(), TensorError> {
        if self.get(&tensor.name).is_some() {
            return Err(TensorError::InvalidTensor {
                name: tensor.name,
                reason: "duplicate entry name".into(),
            });
        }
        self.entries.push(tensor);
        Ok(())
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|t| t.data.len()).sum()
    }

    /// Concatenates every entry's data in map order.
    pub fn flatten(&self) -> Vec<f32> {
        self.entries.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Builds a map with this map's structure and `values` (flattened, map order).
    pub fn with_values(&self, values: &[f32]) -> Result<Self, TensorError> {
        if values.len() != self.num_values() {
            return Err(TensorError::StructureMismatch(format!(
                "expected {} values, got {}",
                self.num_values(),
                values.len()
            )));
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.entries.len());
        for t in &self.entries {
            let n = t.data.len();
            out.push(Tensor::new(
                t.name.clone(),
                t.shape.clone(),
                values[offset..offset + n].to_vec(),
            )?);
            offset += n;
        }
        Ok(Self { entries: out })
    }

    /// Same names, order and shapes as `other`.
    pub fn check_same_structure(&self, other: &TensorMap) -> Result<(), TensorError> {
        if self.entries.len() != other.entries.len() {
            return Err(TensorError::StructureMismatch(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape {
                return Err(TensorError::StructureMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        for t in &self.entries {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteInput(t.name.clone()));
            }
        }
        Ok(())
    }

    /// Bitwise equality of every value (distinguishes `0.0` from `-0.0`).
    pub fn bit_eq(&self, other: &TensorMap) -> bool {
        self.check_same_structure(other).is_ok()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

/// A node's locally trained weights plus the number of examples behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedUpdate {
    pub node_id: String,
    pub sample_count: u64,
    pub weights: TensorMap,
}

impl WeightedUpdate {
    pub fn new(node_id: impl Into<String>, sample_count: u64, weights: TensorMap) -> Result<Self, TensorError> {
        if sample_count == 0 {
            return Err(TensorError::InvalidTensor {
                name: "sample_count".into(),
                reason: "must be at least 1".into(),
            });
        }
        Ok(Self {
            node_id: node_id.into(),
            sample_count,
            weights,
        })
    }
}

/// Sample-count-weighted mean of the updates.
///
/// Updates are visited in ascending `node_id` order with `f64` accumulators, so
/// the result depends only on the multiset of updates. A single update is
/// returned bit-identically.
pub fn aggregate(updates: &[WeightedUpdate]) -> Result<TensorMap, TensorError> {
    let first = updates.first().ok_or(TensorError::EmptyUpdateSet)?;
    let mut ordered: Vec<&WeightedUpdate> = updates.iter().collect();
    ordered.sort_by(|a, b| a.node_id.cmp(&b.node_id));

    let mut seen = HashSet::new();
    for u in &ordered {
        if u.sample_count == 0 {
            return Err(TensorError::InvalidTensor {
                name: u.node_id.clone(),
                reason: "sample_count must be at least 1".into(),
            });
        }
        if !seen.insert(u.node_id.as_str()) {
            return Err(TensorError::StructureMismatch(format!(
                "duplicate node `{}`",
                u.node_id
            )));
        }
        first.weights.check_same_structure(&u.weights)?;
        u.weights.check_finite()?;
    }

    if ordered.len() == 1 {
        return Ok(ordered[0].weights.clone());
    }

    // Counts are reduced by their gcd so that scaling every count by the same
    // factor yields the same floating-point operations.
    let divisor = ordered.iter().fold(0u64, |g, u| gcd(g, u.sample_count));
    let total: f64 = ordered.iter().map(|u| (u.sample_count / divisor) as f64).sum();
    let mut acc = vec![0.0f64; first.weights.num_values()];
    for u in &ordered {
        let n = (u.sample_count / divisor) as f64;
        let mut i = 0;
        for t in u.weights.entries() {
            for &v in &t.data {
                acc[i] += n * f64::from(v);
                i += 1;
            }
        }
    }
    let values: Vec<f32> = acc.iter().map(|s| (s / total) as f32).collect();
    first.weights.with_values(&values)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Euclidean distance over all coordinates.
pub fn l2_distance(a: &TensorMap, b: &TensorMap) -> Result<f64, TensorError> {
    a.check_same_structure(b)?;
    let sum: f64 = a
        .entries()
        .iter()
        .zip(b.entries())
        .flat_map(|(x, y)| x.data.iter().zip(&y.data))
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum.sqrt())
}

pub fn serialize(map: &TensorMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + map.num_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(map.entries.len() as u32).to_be_bytes());
    for t in &map.entries {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_be_bytes());
        out.extend_from_slice(name);
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TensorError> {
        if self.buf.len() - self.pos < n {
            return Err(TensorError::MalformedEncoding(format!(
                "truncated while reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TensorError> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<TensorMap, TensorError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(TensorError::MalformedEncoding("bad magic".into()));
    }
    let count = r.u32("entry count")?;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let name_len = u16::from_be_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| TensorError::MalformedEncoding("name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = r.u32("dimension")? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| TensorError::MalformedEncoding("shape overflows".into()))?;
            shape.push(d);
        }
        let byte_len = len
            .checked_mul(4)
            .ok_or_else(|| TensorError::MalformedEncoding("shape overflows".into()))?;
        let raw = r.take(byte_len, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(name, shape, data).map_err(|e| TensorError::MalformedEncoding(e.to_string()))?;
        map.push(tensor)
            .map_err(|e| TensorError::MalformedEncoding(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(TensorError::MalformedEncoding(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(map)
}
