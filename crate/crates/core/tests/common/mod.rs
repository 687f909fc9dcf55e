//! Dense reference implementations used as oracles by the integration tests.
#![allow(dead_code)]

use hyperlearn::{FactorSet, IntraGraph, SparseTensor};
use ndarray::Array2;

/// Multi-index of linear cell `lin`, last mode fastest.
pub fn decode(mut lin: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for (i, &n) in idx.iter_mut().zip(dims).rev() {
        *i = lin % n;
        lin /= n;
    }
    idx
}

pub fn cells(dims: &[usize]) -> usize {
    dims.iter().product()
}

/// Every cell of the tensor; unstored cells are 0.
pub fn densify(x: &SparseTensor) -> Vec<f64> {
    let dims = x.dims();
    let mut out = vec![0.0; cells(dims)];
    for (idx, v) in x.iter() {
        let lin = idx.iter().zip(dims).fold(0, |a, (&i, &n)| a * n + i);
        out[lin] = v;
    }
    out
}

/// Column of the mode-`mode` unfolding: remaining modes in ascending order, last fastest.
pub fn unfold_col(idx: &[usize], dims: &[usize], mode: usize) -> usize {
    (0..dims.len())
        .filter(|&m| m != mode)
        .fold(0, |a, m| a * dims[m] + idx[m])
}

/// Dense mode-`mode` unfolding of `x`.
pub fn dense_unfold(x: &SparseTensor, mode: usize) -> Array2<f64> {
    let dims = x.dims();
    let n = dims[mode];
    let mut out = Array2::zeros((n, cells(dims) / n));
    for (lin, v) in densify(x).into_iter().enumerate() {
        let idx = decode(lin, dims);
        out[[idx[mode], unfold_col(&idx, dims, mode)]] = v;
    }
    out
}

/// Khatri-Rao product of every factor except `skip`, built row by row from the definition.
pub fn explicit_khatri_rao(fs: &FactorSet, skip: usize) -> Array2<f64> {
    let dims = fs.dims();
    let rest: Vec<usize> = (0..dims.len()).filter(|&m| m != skip).collect();
    let rest_dims: Vec<usize> = rest.iter().map(|&m| dims[m]).collect();
    let rows = cells(&rest_dims);
    let mut out = Array2::from_elem((rows, fs.rank()), 1.0);
    for row in 0..rows {
        let sub = decode(row, &rest_dims);
        for (&m, &i) in rest.iter().zip(&sub) {
            for r in 0..fs.rank() {
                out[[row, r]] *= fs.factor(m)[[i, r]];
            }
        }
    }
    out
}

/// Σ_r Π_m A_m[i_m, r] computed directly.
pub fn cp_value(fs: &FactorSet, idx: &[usize]) -> f64 {
    (0..fs.rank())
        .map(|r| idx.iter().enumerate().map(|(m, &i)| fs.factor(m)[[i, r]]).product::<f64>())
        .sum()
}

/// Squared error over stored entries (observed) or over every cell (full).
pub fn dense_sq_error(x: &SparseTensor, fs: &FactorSet) -> f64 {
    if x.observed_only() {
        x.iter().map(|(idx, v)| (v - cp_value(fs, idx)).powi(2)).sum()
    } else {
        densify(x)
            .iter()
            .enumerate()
            .map(|(lin, v)| (v - cp_value(fs, &decode(lin, x.dims()))).powi(2))
            .sum()
    }
}

/// ½ Σ_m tr(A_mᵀ L_m A_m) + λ · squared error, everything dense.
pub fn dense_loss(x: &SparseTensor, graphs: &[IntraGraph], lambda: f64, fs: &FactorSet) -> f64 {
    let reg: f64 = graphs
        .iter()
        .enumerate()
        .map(|(m, g)| {
            let a = fs.factor(m);
            0.5 * (a.t().dot(&g.laplacian().to_dense()).dot(a)).diag().sum()
        })
        .sum();
    reg + lambda * dense_sq_error(x, fs)
}

/// I − D^{-1/2} W D^{-1/2} from a dense weight matrix; isolated nodes get a zero row.
pub fn dense_normalized_laplacian(w: &Array2<f64>) -> Array2<f64> {
    let n = w.nrows();
    let d: Vec<f64> = w.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if d[i] == 0.0 || d[j] == 0.0 {
            return 0.0;
        }
        let off = w[[i, j]] / (d[i].sqrt() * d[j].sqrt());
        if i == j {
            1.0 - off
        } else {
            -off
        }
    })
}

/// Central differences of `f` over every entry of `a`.
pub fn fd_gradient(a: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = a.clone();
    let mut g = Array2::zeros(a.dim());
    for ((i, j), &v) in a.indexed_iter() {
        probe[[i, j]] = v + h;
        let up = f(&probe);
        probe[[i, j]] = v - h;
        let down = f(&probe);
        probe[[i, j]] = v;
        g[[i, j]] = (up - down) / (2.0 * h);
    }
    g
}

/// Entry-wise relative error with an absolute floor of 1e-6 on the denominator.
pub fn max_rel_err<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// ‖a − b‖_F / ‖b‖_F (0 when both vanish).
pub fn frob_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let norm = b.mapv(|v| v * v).sum().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}
