//! Flat parameter vectors, per-coordinate importance, and critical sets.

use std::collections::HashSet;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// One contiguous layer segment inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSegment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered list of contiguous, non-overlapping layer segments covering the
/// whole vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<LayerSegment>,
    total_len: usize,
}

impl Layout {
    /// Build a layout from `(name, len)` pairs; offsets are assigned
    /// contiguously in order.
    pub fn new(parts: &[(&str, usize)]) -> Self {
        let mut segments = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (name, len) in parts {
            segments.push(LayerSegment {
                name: (*name).to_string(),
                offset,
                len: *len,
            });
            offset += len;
        }
        Layout {
            segments,
            total_len: offset,
        }
    }

    /// Single anonymous segment covering `len` values.
    pub fn flat(len: usize) -> Self {
        Layout::new(&[("flat", len)])
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn segments(&self) -> &[LayerSegment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&LayerSegment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Flat real-valued model parameters or updates.
///
/// Two vectors are combinable only when their layouts are identical; all
/// values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Layout(format!(
                "layout covers {} values but {} were given",
                layout.total_len(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite value {v}")));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout.total_len();
        ParamVector {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    fn check_combinable(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Layout(
                "parameter vectors have different layouts".into(),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_combinable(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        ParamVector::new(values, self.layout.clone())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_combinable(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        ParamVector::new(values, self.layout.clone())
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|v| v * c).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Serialize as a layout header followed by little-endian f64 values.
    ///
    /// Header: magic `FPV1`, u32 segment count, then per segment a u32
    /// length-prefixed name, u64 offset, u64 length.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"FPV1")?;
        w.write_all(&(self.layout.segments.len() as u32).to_le_bytes())?;
        for seg in &self.layout.segments {
            let name = seg.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(seg.offset as u64).to_le_bytes())?;
            w.write_all(&(seg.len as u64).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<ParamVector> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"FPV1" {
            return Err(Error::Format("bad magic, not a parameter file".into()));
        }
        let n_segs = read_u32(r)? as usize;
        let mut segments = Vec::with_capacity(n_segs);
        let mut expected_offset = 0usize;
        for _ in 0..n_segs {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("layer name is not utf-8".into()))?;
            let offset = read_u64(r)? as usize;
            let len = read_u64(r)? as usize;
            if offset != expected_offset {
                return Err(Error::Format("non-contiguous layout segments".into()));
            }
            expected_offset += len;
            segments.push(LayerSegment { name, offset, len });
        }
        let layout = Layout {
            segments,
            total_len: expected_offset,
        };
        let mut values = Vec::with_capacity(layout.total_len());
        let mut buf = [0u8; 8];
        for _ in 0..layout.total_len() {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        ParamVector::new(values, layout)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Per-coordinate nonnegative importance values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    values: Vec<f64>,
}

impl ImportanceVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Top-k and bottom-k coordinate index sets by importance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticalSets {
    pub top: HashSet<usize>,
    pub bottom: HashSet<usize>,
    pub k_count: usize,
}

/// Coordinate index -> rank, where rank 0 is the least important coordinate
/// and rank dim-1 the most important. Ties broken by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankMap {
    ranks: Vec<usize>,
}

impl RankMap {
    pub fn rank_of(&self, index: usize) -> usize {
        self.ranks[index]
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn dim(&self) -> usize {
        self.ranks.len()
    }
}

/// Per-coordinate importance: `|delta[n] * theta[n]|`.
pub fn compute_importance(delta: &ParamVector, theta: &ParamVector) -> Result<ImportanceVector> {
    delta.check_combinable(theta)?;
    let values = delta
        .values
        .iter()
        .zip(&theta.values)
        .map(|(d, t)| (d * t).abs())
        .collect();
    Ok(ImportanceVector { values })
}

/// Indices 0..dim sorted ascending by `(importance, index)`.
fn argsort_ascending(imp: &ImportanceVector) -> Vec<usize> {
    let mut order: Vec<usize> = (0..imp.dim()).collect();
    order.sort_by(|&a, &b| {
        imp.values[a]
            .partial_cmp(&imp.values[b])
            .expect("importance values are finite")
            .then(a.cmp(&b))
    });
    order
}

/// Extract the k largest- and k smallest-importance index sets, with
/// `k = max(1, floor(k_ratio * dim))`.
///
/// The bottom set takes the lowest indices first among ties; the top set
/// takes the lowest indices among ties that are not already in the bottom
/// set, so the two sets stay disjoint whenever `2k <= dim`.
pub fn extract_critical_sets(imp: &ImportanceVector, k_ratio: f64) -> Result<CriticalSets> {
    if !(0.0..1.0).contains(&k_ratio) || k_ratio <= 0.0 {
        return Err(Error::Config(format!("k_ratio {k_ratio} not in (0,1)")));
    }
    let dim = imp.dim();
    if dim < 2 {
        return Err(Error::Config("importance dimension must be >= 2".into()));
    }
    let k_count = ((k_ratio * dim as f64).floor() as usize).max(1);
    if 2 * k_count > dim {
        return Err(Error::Config(format!(
            "2*k_count = {} exceeds dimension {dim}",
            2 * k_count
        )));
    }
    let asc = argsort_ascending(imp);
    let bottom: HashSet<usize> = asc[..k_count].iter().copied().collect();
    // Descending by value, ties by ascending index; skip anything claimed
    // by the bottom set so degenerate all-tied inputs still yield disjoint
    // sets.
    let mut desc: Vec<usize> = (0..dim).collect();
    desc.sort_by(|&a, &b| {
        imp.values[b]
            .partial_cmp(&imp.values[a])
            .expect("importance values are finite")
            .then(a.cmp(&b))
    });
    let top: HashSet<usize> = desc
        .into_iter()
        .filter(|i| !bottom.contains(i))
        .take(k_count)
        .collect();
    Ok(CriticalSets {
        top,
        bottom,
        k_count,
    })
}

/// Rank coordinates by ascending importance; rank 0 = least important.
pub fn rank_map(imp: &ImportanceVector) -> RankMap {
    let asc = argsort_ascending(imp);
    let mut ranks = vec![0usize; imp.dim()];
    for (rank, &idx) in asc.iter().enumerate() {
        ranks[idx] = rank;
    }
    RankMap { ranks }
}

#[cfg(test)]
pub(crate) fn importance_from_values(values: Vec<f64>) -> ImportanceVector {
    ImportanceVector { values }
}
