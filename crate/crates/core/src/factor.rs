//! Factor matrices of a CP model and the products the per-mode updates need.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sptensor::SparseTensor;

/// Row cap for explicitly materialized Khatri-Rao products.
pub const KHATRI_RAO_ROW_CAP: usize = 1_000_000;

/// The K factor matrices `A_θ` (`N_θ × R`) of a rank-R CP model.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    rank: usize,
    factors: Vec<Array2<f64>>,
    seed: u64,
}

impl FactorSet {
    pub fn new(factors: Vec<Array2<f64>>) -> Result<Self> {
        Self::with_seed(factors, 0)
    }

    pub fn with_seed(factors: Vec<Array2<f64>>, seed: u64) -> Result<Self> {
        let Some(first) = factors.first() else {
            return Err(Error::Invalid("a factor set needs at least one factor".into()));
        };
        let rank = first.ncols();
        if rank == 0 {
            return Err(Error::Invalid("rank must be at least 1".into()));
        }
        for (m, a) in factors.iter().enumerate() {
            if a.ncols() != rank {
                return Err(Error::Shape(format!(
                    "factor {m} has {} columns, expected {rank}",
                    a.ncols()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("factor {m} has non-finite entries")));
            }
        }
        // Row access below slices the raw buffer, so force C order.
        let factors = factors
            .into_iter()
            .map(|a| a.as_standard_layout().into_owned())
            .collect();
        Ok(FactorSet { rank, factors, seed })
    }

    /// Entries i.i.d. uniform on `[0, 1/√R)` from a seeded ChaCha stream.
    pub fn init(dims: &[usize], rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Invalid("rank must be at least 1".into()));
        }
        if dims.is_empty() {
            return Err(Error::Invalid("no modes given".into()));
        }
        let scale = 1.0 / (rank as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = dims
            .iter()
            .map(|&n| Array2::from_shape_simple_fn((n, rank), || rng.random::<f64>() * scale))
            .collect();
        Ok(FactorSet { rank, factors, seed })
    }

    pub fn zeros(dims: &[usize], rank: usize) -> Result<Self> {
        Self::new(dims.iter().map(|&n| Array2::zeros((n, rank))).collect())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|a| a.nrows()).collect()
    }

    pub fn factor(&self, mode: usize) -> &Array2<f64> {
        &self.factors[mode]
    }

    pub fn factors(&self) -> &[Array2<f64>] {
        &self.factors
    }

    /// Replaces one factor; the shape must not change.
    pub fn set_factor(&mut self, mode: usize, a: Array2<f64>) -> Result<()> {
        let cur = self
            .factors
            .get(mode)
            .ok_or_else(|| Error::Index(format!("mode {mode} >= order {}", self.order())))?;
        if cur.dim() != a.dim() {
            return Err(Error::Shape(format!(
                "factor {mode} is {:?}, replacement is {:?}",
                cur.dim(),
                a.dim()
            )));
        }
        self.factors[mode] = a.as_standard_layout().into_owned();
        Ok(())
    }

    pub fn into_factors(self) -> Vec<Array2<f64>> {
        self.factors
    }

    #[inline]
    pub(crate) fn row(&self, mode: usize, i: usize) -> &[f64] {
        let r = self.rank;
        let data = self.factors[mode].as_slice().expect("factors are kept in standard layout");
        &data[i * r..(i + 1) * r]
    }

    /// `Σ_r Π_θ A_θ[idx_θ, r]` without bounds checks beyond slice indexing.
    #[inline]
    pub(crate) fn reconstruct_unchecked(&self, idx: &[usize]) -> f64 {
        let mut acc = [1.0f64; 32];
        if self.rank <= acc.len() {
            let acc = &mut acc[..self.rank];
            for (mode, &i) in idx.iter().enumerate() {
                for (a, &v) in acc.iter_mut().zip(self.row(mode, i)) {
                    *a *= v;
                }
            }
            acc.iter().sum()
        } else {
            (0..self.rank)
                .map(|r| idx.iter().enumerate().map(|(m, &i)| self.row(m, i)[r]).product::<f64>())
                .sum()
        }
    }

    /// `‖Σ_r a_r^(1) ∘ .. ∘ a_r^(K)‖²_F` from the factor Gram matrices.
    pub fn model_sq_norm(&self) -> f64 {
        let mut h = Array2::<f64>::ones((self.rank, self.rank));
        for a in &self.factors {
            h *= &a.t().dot(a);
        }
        h.sum()
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#factors {} {}", self.order(), self.rank);
        for (m, a) in self.factors.iter().enumerate() {
            let _ = writeln!(out, "#mode {m} {}", a.nrows());
            write_rows(&mut out, a.view());
        }
        out
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_checkpoint(&text, path)
    }

    pub fn parse_checkpoint(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (ln, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 0, "empty checkpoint"))?;
        let hw: Vec<&str> = header.split_whitespace().collect();
        if hw.len() != 3 || hw[0] != "#factors" {
            return Err(Error::parse(path, ln + 1, "expected `#factors K R`"));
        }
        let k: usize = parse_word(hw[1], path, ln)?;
        let r: usize = parse_word(hw[2], path, ln)?;
        let mut factors = Vec::with_capacity(k);
        for m in 0..k {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("missing block for mode {m}")))?;
            let w: Vec<&str> = line.split_whitespace().collect();
            if w.len() != 3 || w[0] != "#mode" || parse_word::<usize>(w[1], path, ln)? != m {
                return Err(Error::parse(path, ln + 1, format!("expected `#mode {m} N`")));
            }
            let n: usize = parse_word(w[2], path, ln)?;
            let mut data = Vec::with_capacity(n * r);
            for _ in 0..n {
                let (ln, line) = lines
                    .next()
                    .ok_or_else(|| Error::parse(path, 0, format!("mode {m} is truncated")))?;
                let row = parse_row(line, path, ln)?;
                if row.len() != r {
                    return Err(Error::parse(path, ln + 1, format!("expected {r} columns, found {}", row.len())));
                }
                data.extend(row);
            }
            factors.push(Array2::from_shape_vec((n, r), data).expect("length checked"));
        }
        Self::new(factors)
    }
}

pub(crate) fn write_rows(out: &mut String, a: ArrayView2<f64>) {
    for row in a.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push('\t');
            }
            first = false;
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
}

pub(crate) fn parse_row(line: &str, path: &Path, ln: usize) -> Result<Vec<f64>> {
    line.split('\t')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(path, ln + 1, format!("bad number `{f}`")))
        })
        .collect()
}

pub(crate) fn parse_word<T: std::str::FromStr>(w: &str, path: &Path, ln: usize) -> Result<T> {
    w.parse::<T>()
        .map_err(|_| Error::parse(path, ln + 1, format!("bad field `{w}`")))
}

/// Column-wise Kronecker product `M_1 ⊙ M_2 ⊙ .. ⊙ M_m`, last factor varying fastest.
pub fn khatri_rao(mats: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    let Some(first) = mats.first() else {
        return Err(Error::Invalid("khatri_rao of an empty list".into()));
    };
    let r = first.ncols();
    if let Some(m) = mats.iter().position(|m| m.ncols() != r) {
        return Err(Error::Shape(format!(
            "matrix {m} has {} columns, expected {r}",
            mats[m].ncols()
        )));
    }
    let rows = mats
        .iter()
        .try_fold(1usize, |acc, m| acc.checked_mul(m.nrows()))
        .filter(|&n| n <= KHATRI_RAO_ROW_CAP)
        .ok_or_else(|| Error::Invalid(format!("khatri_rao exceeds {KHATRI_RAO_ROW_CAP} rows; use mttkrp")))?;
    let mut out = first.to_owned();
    for m in &mats[1..] {
        let mut next = Array2::zeros((out.nrows() * m.nrows(), r));
        for (i, a) in out.rows().into_iter().enumerate() {
            for (j, b) in m.rows().into_iter().enumerate() {
                let mut dst = next.row_mut(i * m.nrows() + j);
                for c in 0..r {
                    dst[c] = a[c] * b[c];
                }
            }
        }
        out = next;
    }
    debug_assert_eq!(out.nrows(), rows);
    Ok(out)
}

/// Hadamard product of `A_θᵀA_θ` over every mode except `skip`, i.e. `ΩᵀΩ` for that mode.
pub fn gram_hadamard(fs: &FactorSet, skip: usize) -> Result<Array2<f64>> {
    if skip >= fs.order() {
        return Err(Error::Index(format!("mode {skip} >= order {}", fs.order())));
    }
    let mut h = Array2::<f64>::ones((fs.rank(), fs.rank()));
    for (m, a) in fs.factors().iter().enumerate() {
        if m != skip {
            h *= &a.t().dot(a);
        }
    }
    Ok(h)
}

/// Sparse `X_(mode) · Ω_mode`, touching only stored entries.
pub fn mttkrp(x: &SparseTensor, fs: &FactorSet, mode: usize) -> Result<Array2<f64>> {
    crate::sptensor::check_compatible(x, fs)?;
    if mode >= fs.order() {
        return Err(Error::Index(format!("mode {mode} >= order {}", fs.order())));
    }
    Ok(mttkrp_with_values(x, x.values(), fs, mode))
}

/// MTTKRP over the sparsity pattern of `x` with `values` substituted for its entries.
pub(crate) fn mttkrp_with_values(x: &SparseTensor, values: &[f64], fs: &FactorSet, mode: usize) -> Array2<f64> {
    let r = fs.rank();
    let n = fs.factor(mode).nrows();
    let mut out = vec![0.0f64; n * r];
    let mut prod = vec![0.0f64; r];
    for (idx, &v) in x.coords().chunks_exact(x.order()).zip(values) {
        prod.iter_mut().for_each(|p| *p = v);
        for (m, &i) in idx.iter().enumerate() {
            if m != mode {
                for (p, &a) in prod.iter_mut().zip(fs.row(m, i)) {
                    *p *= a;
                }
            }
        }
        let dst = &mut out[idx[mode] * r..(idx[mode] + 1) * r];
        for (d, p) in dst.iter_mut().zip(&prod) {
            *d += p;
        }
    }
    Array2::from_shape_vec((n, r), out).expect("shape matches buffer")
}
