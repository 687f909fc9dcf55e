//! Intra-modality similarity graphs, their normalized Laplacians and Chebyshev filtering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::factor::{parse_row, parse_word};

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    /// Sums duplicate triplets.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); nrows];
        for &(i, j, v) in triplets {
            if i >= nrows || j >= ncols {
                return Err(Error::Index(format!("({i}, {j}) outside {nrows}×{ncols}")));
            }
            *rows[i].entry(j).or_insert(0.0) += v;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for row in rows {
            for (j, v) in row {
                indices.push(j);
                data.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CsrMatrix {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.data[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.indptr[i]..self.indptr[i + 1];
        match self.indices[span.clone()].binary_search(&j) {
            Ok(p) => self.data[span.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.nrows == self.ncols
            && (0..self.nrows).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// `self · x` for a dense right-hand side.
    pub fn dot_dense(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.ncols {
            return Err(Error::Shape(format!(
                "{}×{} matrix times {}×{}",
                self.nrows,
                self.ncols,
                x.nrows(),
                x.ncols()
            )));
        }
        let mut out = Array2::zeros((self.nrows, x.ncols()));
        for (i, mut dst) in out.rows_mut().into_iter().enumerate() {
            for (j, v) in self.row(i) {
                dst.scaled_add(v, &x.row(j));
            }
        }
        Ok(out)
    }
}

/// One modality's similarity graph `G_θ` with cached degrees and normalized Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraGraph {
    adjacency: CsrMatrix,
    degrees: Vec<f64>,
    laplacian: CsrMatrix,
}

impl IntraGraph {
    pub fn from_adjacency(adjacency: CsrMatrix) -> Result<Self> {
        let laplacian = normalized_laplacian(&adjacency)?;
        let degrees = (0..adjacency.nrows()).map(|i| adjacency.row(i).map(|(_, v)| v).sum()).collect();
        Ok(IntraGraph {
            adjacency,
            degrees,
            laplacian,
        })
    }

    /// Undirected graph from an edge list, each edge given once in either orientation.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut seen = HashSet::with_capacity(edges.len());
        let mut triplets = Vec::with_capacity(2 * edges.len());
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::Index(format!("edge ({i}, {j}) in a graph of {n} nodes")));
            }
            if i == j {
                return Err(Error::Invalid(format!("self-loop on node {i}")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Invalid(format!("edge ({i}, {j}) has weight {w}")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::Invalid(format!("edge ({i}, {j}) listed twice")));
            }
            triplets.push((i, j, w));
            triplets.push((j, i, w));
        }
        Self::from_adjacency(CsrMatrix::from_triplets(n, n, &triplets)?)
    }

    pub fn edgeless(n: usize) -> Self {
        IntraGraph {
            adjacency: CsrMatrix::zeros(n, n),
            degrees: vec![0.0; n],
            laplacian: CsrMatrix::zeros(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }

    /// Undirected edges `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n())
            .flat_map(|i| self.adjacency.row(i).filter(move |&(j, _)| j > i).map(move |(j, w)| (i, j, w)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    /// Writes the edge-list TSV (`#nodes n`, then `i<TAB>j[<TAB>w]`, weight omitted when 1).
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_tsv_string(&self) -> String {
        let mut out = format!("#nodes {}\n", self.n());
        for (i, j, w) in self.edges() {
            if w == 1.0 {
                let _ = writeln!(out, "{i}\t{j}");
            } else {
                let _ = writeln!(out, "{i}\t{j}\t{w:?}");
            }
        }
        out
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut n = None;
        let mut edges = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let w: Vec<&str> = rest.split_whitespace().collect();
                if n.is_none() {
                    if w.len() != 2 || w[0] != "nodes" {
                        return Err(Error::parse(path, ln + 1, "expected `#nodes n`"));
                    }
                    n = Some(parse_word::<usize>(w[1], path, ln)?);
                }
                continue;
            }
            if n.is_none() {
                return Err(Error::parse(path, ln + 1, "edge before `#nodes` header"));
            }
            let f: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&f.len()) {
                return Err(Error::parse(path, ln + 1, "expected `i<TAB>j[<TAB>weight]`"));
            }
            let i = parse_word::<usize>(f[0].trim(), path, ln)?;
            let j = parse_word::<usize>(f[1].trim(), path, ln)?;
            let w = match f.get(2) {
                Some(s) => parse_word::<f64>(s.trim(), path, ln)?,
                None => 1.0,
            };
            edges.push((i, j, w));
        }
        let n = n.ok_or_else(|| Error::parse(path, 0, "missing `#nodes` header"))?;
        Self::from_edges(n, &edges).map_err(|e| Error::parse(path, 0, e.to_string()))
    }
}

/// Reads a node feature TSV: one row per node, tab-separated reals.
pub fn read_features(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = parse_row(line, path, ln)?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::parse(path, ln + 1, format!("expected {w} columns, found {}", row.len())))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::parse(path, 0, "no feature rows"))?;
    Ok(Array2::from_shape_vec((rows, width), data).expect("rectangular"))
}

/// Unweighted symmetrized k-nearest-neighbour graph under Euclidean distance.
///
/// Ties in distance go to the lower node id.
pub fn knn_graph(features: ArrayView2<f64>, k: usize) -> Result<IntraGraph> {
    let n = features.nrows();
    if k >= n {
        return Err(Error::Invalid(format!("k = {k} needs more than {n} nodes")));
    }
    if features.ncols() == 0 {
        return Err(Error::Invalid("feature matrix has no columns".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite feature value".into()));
    }
    let mut pairs = HashSet::new();
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dist.clear();
        let a = features.row(i);
        for j in (0..n).filter(|&j| j != i) {
            let b = features.row(j);
            let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            dist.push((d, j));
        }
        if k > 0 && k < dist.len() {
            dist.select_nth_unstable_by(k - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        }
        for &(_, j) in dist.iter().take(k) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let mut edges: Vec<(usize, usize, f64)> = pairs.into_iter().map(|(i, j)| (i, j, 1.0)).collect();
    edges.sort_by_key(|e| (e.0, e.1));
    IntraGraph::from_edges(n, &edges)
}

/// Unweighted graph linking every pair of nodes that share at least one group.
pub fn cooccurrence_graph(memberships: &[(usize, usize)], n: usize) -> Result<IntraGraph> {
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(node, group) in memberships {
        if node >= n {
            return Err(Error::Index(format!("node {node} in a graph of {n} nodes")));
        }
        groups.entry(group).or_default().push(node);
    }
    let mut pairs = HashSet::new();
    for members in groups.values_mut() {
        members.sort_unstable();
        members.dedup();
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                pairs.insert((i, j));
            }
        }
    }
    let mut edges: Vec<(usize, usize, f64)> = pairs.into_iter().map(|(i, j)| (i, j, 1.0)).collect();
    edges.sort_by_key(|e| (e.0, e.1));
    IntraGraph::from_edges(n, &edges)
}

/// `I − D^{-1/2} Λ D^{-1/2}`; isolated nodes get an all-zero row and column.
pub fn normalized_laplacian(adjacency: &CsrMatrix) -> Result<CsrMatrix> {
    if !adjacency.is_symmetric() {
        return Err(Error::Invalid("adjacency matrix is not symmetric".into()));
    }
    let n = adjacency.nrows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = adjacency.row(i).map(|(_, v)| v).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut triplets = Vec::with_capacity(adjacency.nnz() + n);
    for i in 0..n {
        if inv_sqrt[i] > 0.0 {
            triplets.push((i, i, 1.0));
        }
        for (j, v) in adjacency.row(i) {
            if j != i {
                // scale product first so (i, j) and (j, i) round identically
                triplets.push((i, j, -v * (inv_sqrt[i] * inv_sqrt[j])));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &triplets)
}

/// Chebyshev terms `[T_0(L̃)X, .., T_p(L̃)X]` with `L̃ = L − I`.
pub fn chebyshev_apply(laplacian: &CsrMatrix, x: ArrayView2<f64>, p: usize) -> Result<Vec<Array2<f64>>> {
    if laplacian.nrows() != laplacian.ncols() || laplacian.ncols() != x.nrows() {
        return Err(Error::Shape(format!(
            "{}×{} Laplacian applied to {} rows",
            laplacian.nrows(),
            laplacian.ncols(),
            x.nrows()
        )));
    }
    let shifted = |y: &Array2<f64>| -> Array2<f64> {
        let mut out = laplacian.dot_dense(&y.view()).expect("shape checked");
        out -= y;
        out
    };
    let mut terms = Vec::with_capacity(p + 1);
    terms.push(x.to_owned());
    if p >= 1 {
        terms.push(shifted(&terms[0]));
    }
    for j in 2..=p {
        let mut next = shifted(&terms[j - 1]);
        next *= 2.0;
        next -= &terms[j - 2];
        terms.push(next);
    }
    Ok(terms)
}
