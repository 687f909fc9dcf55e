//! Sparse K-mode tensors in coordinate (COO) form.
//!
//! A [`SparseTensor`] stores the observed hyperedges of a K-partite hypergraph:
//! every entry is an index tuple into `N_1 × .. × N_K` plus a real weight. When
//! `observed_only` is false the unstored cells are implicit zeros (the usual
//! binary adjacency tensor); when it is true only the stored cells take part in
//! the reconstruction error (ratings with unknown cells).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::factor::FactorSet;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    dims: Vec<usize>,
    /// Row-major `nnz × K` coordinates.
    coords: Vec<usize>,
    values: Vec<f64>,
    observed_only: bool,
}

impl SparseTensor {
    /// Builds a tensor from `(index, value)` pairs, rejecting out-of-range and duplicate indices.
    pub fn new(dims: Vec<usize>, entries: Vec<(Vec<usize>, f64)>, observed_only: bool) -> Result<Self> {
        let k = dims.len();
        let mut coords = Vec::with_capacity(entries.len() * k);
        let mut values = Vec::with_capacity(entries.len());
        for (n, (idx, v)) in entries.into_iter().enumerate() {
            if idx.len() != k {
                return Err(Error::Shape(format!(
                    "entry {n} has {} indices, tensor order is {k}",
                    idx.len()
                )));
            }
            coords.extend_from_slice(&idx);
            values.push(v);
        }
        Self::from_parts(dims, coords, values, observed_only)
    }

    /// Builds a tensor from flat row-major coordinates (`values.len() × K`).
    pub fn from_parts(
        dims: Vec<usize>,
        coords: Vec<usize>,
        values: Vec<f64>,
        observed_only: bool,
    ) -> Result<Self> {
        let k = dims.len();
        if k < 2 {
            return Err(Error::Invalid(format!("tensor order must be at least 2, got {k}")));
        }
        if let Some(m) = dims.iter().position(|&n| n == 0) {
            return Err(Error::Invalid(format!("mode {m} has zero size")));
        }
        if coords.len() != values.len() * k {
            return Err(Error::Shape(format!(
                "{} coordinates for {} values of order {k}",
                coords.len(),
                values.len()
            )));
        }
        let mut seen: HashSet<&[usize]> = HashSet::with_capacity(values.len());
        for (n, idx) in coords.chunks_exact(k).enumerate() {
            check_index(&dims, idx).map_err(|e| Error::Index(format!("entry {n}: {e}")))?;
            if !seen.insert(idx) {
                return Err(Error::Invalid(format!("duplicate entry {idx:?} at position {n}")));
            }
        }
        if let Some(n) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("entry {n} has non-finite value")));
        }
        Ok(SparseTensor {
            dims,
            coords,
            values,
            observed_only,
        })
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed_only(&self) -> bool {
        self.observed_only
    }

    pub fn set_observed_only(&mut self, observed_only: bool) {
        self.observed_only = observed_only;
    }

    pub fn entry(&self, entry: usize) -> &[usize] {
        let k = self.order();
        &self.coords[entry * k..(entry + 1) * k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        self.coords
            .chunks_exact(self.order())
            .zip(self.values.iter().copied())
    }

    /// Same sparsity pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(Error::Shape(format!(
                "{} replacement values for {} entries",
                values.len(),
                self.nnz()
            )));
        }
        Ok(SparseTensor {
            dims: self.dims.clone(),
            coords: self.coords.clone(),
            values,
            observed_only: self.observed_only,
        })
    }

    /// Sum of squared stored values.
    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Writes the relation TSV format: a `#dims` header then one entry per line.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_tsv_string(&self) -> String {
        let mut out = String::with_capacity(self.nnz() * 8 * (self.order() + 1));
        out.push_str("#dims");
        for n in &self.dims {
            let _ = write!(out, " {n}");
        }
        out.push_str(if self.observed_only { " observed\n" } else { " full\n" });
        for (idx, v) in self.iter() {
            for i in idx {
                let _ = write!(out, "{i}\t");
            }
            // `{:?}` prints the shortest representation that parses back to the same bits.
            let _ = writeln!(out, "{v:?}");
        }
        out
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (dims, observed_only) = loop {
            let Some((ln, line)) = lines.next() else {
                return Err(Error::parse(path, 0, "missing #dims header"));
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            if words.next() != Some("#dims") {
                return Err(Error::parse(path, ln + 1, "expected `#dims N_1 .. N_K [observed|full]`"));
            }
            let mut dims = Vec::new();
            let mut observed = false;
            for w in words {
                match w {
                    "observed" => observed = true,
                    "full" => observed = false,
                    _ => dims.push(
                        w.parse::<usize>()
                            .map_err(|_| Error::parse(path, ln + 1, format!("bad dimension `{w}`")))?,
                    ),
                }
            }
            break (dims, observed);
        };
        let k = dims.len();
        let mut coords = Vec::new();
        let mut values = Vec::new();
        for (ln, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != k + 1 {
                return Err(Error::parse(
                    path,
                    ln + 1,
                    format!("expected {} fields, found {}", k + 1, fields.len()),
                ));
            }
            for f in &fields[..k] {
                let i = f
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::parse(path, ln + 1, format!("bad index `{f}`")))?;
                coords.push(i);
            }
            let v = fields[k]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(path, ln + 1, format!("bad value `{}`", fields[k])))?;
            values.push(v);
        }
        Self::from_parts(dims, coords, values, observed_only).map_err(|e| Error::parse(path, 0, e.to_string()))
    }
}

fn check_index(dims: &[usize], idx: &[usize]) -> Result<()> {
    if idx.len() != dims.len() {
        return Err(Error::Shape(format!(
            "index has {} components, tensor order is {}",
            idx.len(),
            dims.len()
        )));
    }
    for (m, (&i, &n)) in idx.iter().zip(dims).enumerate() {
        if i >= n {
            return Err(Error::Index(format!("index {i} >= size {n} in mode {m}")));
        }
    }
    Ok(())
}

/// Column of `idx` in the mode-`mode` unfolding.
///
/// Remaining modes are laid out in ascending order with the last one varying
/// fastest, which is the row order of `A_1 ⊙ .. ⊙ A_{mode-1} ⊙ A_{mode+1} ⊙ .. ⊙ A_K`.
pub fn unfold_column_index(dims: &[usize], mode: usize, idx: &[usize]) -> Result<usize> {
    if mode >= dims.len() {
        return Err(Error::Index(format!("mode {mode} >= order {}", dims.len())));
    }
    check_index(dims, idx)?;
    let mut col = 0usize;
    for k in (0..dims.len()).filter(|&k| k != mode) {
        col = col * dims[k] + idx[k];
    }
    Ok(col)
}

/// CP model value `Σ_r Π_θ A_θ[idx_θ, r]`.
pub fn reconstruct_at(factors: &FactorSet, idx: &[usize]) -> Result<f64> {
    check_index(&factors.dims(), idx)?;
    Ok(factors.reconstruct_unchecked(idx))
}

/// Squared reconstruction error of `factors` against `x`.
///
/// With `observed_only` only stored cells count. Otherwise the error over the
/// whole tensor is expanded as `‖X̂‖² − 2⟨X, X̂⟩ + ‖X‖²`, where `‖X̂‖²` comes from
/// the Hadamard product of the factor Gram matrices, so nothing is densified.
pub fn masked_sq_error(x: &SparseTensor, factors: &FactorSet) -> Result<f64> {
    check_compatible(x, factors)?;
    Ok(sq_error_unchecked(x, factors))
}

pub(crate) fn check_compatible(x: &SparseTensor, factors: &FactorSet) -> Result<()> {
    let fd = factors.dims();
    if fd != x.dims() {
        return Err(Error::Shape(format!("tensor dims {:?} vs factor rows {:?}", x.dims(), fd)));
    }
    Ok(())
}

pub(crate) fn sq_error_unchecked(x: &SparseTensor, factors: &FactorSet) -> f64 {
    if x.observed_only() {
        x.iter()
            .map(|(idx, v)| {
                let d = v - factors.reconstruct_unchecked(idx);
                d * d
            })
            .sum()
    } else {
        let model_sq = factors.model_sq_norm();
        let cross: f64 = x
            .iter()
            .map(|(idx, v)| v * factors.reconstruct_unchecked(idx))
            .sum();
        // Cancellation can leave a tiny negative number when the fit is exact.
        (model_sq - 2.0 * cross + x.sq_norm()).max(0.0)
    }
}
