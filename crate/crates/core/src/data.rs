//! Dataset loading, persistence and planted synthetic hypergraphs.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};
use crate::factor::FactorSet;
use crate::graph::{knn_graph, IntraGraph};
use crate::sptensor::SparseTensor;

/// Training tensor, held-out entries and one graph per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tensor: SparseTensor,
    /// Held-out entries over the same dims (possibly empty).
    pub test: SparseTensor,
    pub graphs: Vec<IntraGraph>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn new(tensor: SparseTensor, test: SparseTensor, graphs: Vec<IntraGraph>, names: Vec<String>) -> Result<Self> {
        if test.dims() != tensor.dims() {
            return Err(Error::Shape(format!("test dims {:?} vs train dims {:?}", test.dims(), tensor.dims())));
        }
        if graphs.len() != tensor.order() || names.len() != tensor.order() {
            return Err(Error::Shape(format!(
                "{} graphs and {} names for order {}",
                graphs.len(),
                names.len(),
                tensor.order()
            )));
        }
        for (m, (g, &n)) in graphs.iter().zip(tensor.dims()).enumerate() {
            if g.n() != n {
                return Err(Error::Shape(format!("graph {m} has {} nodes, mode size is {n}", g.n())));
            }
        }
        let train: HashSet<&[usize]> = tensor.iter().map(|(i, _)| i).collect();
        if let Some((idx, _)) = test.iter().find(|(i, _)| train.contains(i)) {
            return Err(Error::Invalid(format!("entry {idx:?} is in both train and test")));
        }
        Ok(Dataset {
            tensor,
            test,
            graphs,
            names,
        })
    }

    /// Same data with every graph replaced by an edgeless one.
    pub fn without_graphs(&self) -> Self {
        Dataset {
            graphs: self.tensor.dims().iter().map(|&n| IntraGraph::edgeless(n)).collect(),
            ..self.clone()
        }
    }

    /// Writes `manifest.txt`, `tensor.tsv`, `test.tsv` and `graph_<m>.tsv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.tensor.write_tsv(dir.join("tensor.tsv"))?;
        self.test.write_tsv(dir.join("test.tsv"))?;
        let mut manifest = String::from("tensor=tensor.tsv\ntest=test.tsv\n");
        for (m, g) in self.graphs.iter().enumerate() {
            g.write_tsv(dir.join(format!("graph_{m}.tsv")))?;
            let _ = writeln!(manifest, "graph_{m}=graph_{m}.tsv");
            let _ = writeln!(manifest, "name_{m}={}", self.names[m]);
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads a manifest; relative paths resolve against the manifest's directory.
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let kv = KeyValues::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let tensor_path: String = kv.require("tensor")?;
        let tensor = SparseTensor::read_tsv(resolve(&tensor_path))?;
        let test = match kv.raw("test") {
            Some(p) => SparseTensor::read_tsv(resolve(p))?,
            None => SparseTensor::from_parts(tensor.dims().to_vec(), vec![], vec![], tensor.observed_only())?,
        };
        let k = tensor.order();
        let mut graphs = Vec::with_capacity(k);
        let mut names = Vec::with_capacity(k);
        for m in 0..k {
            graphs.push(match kv.raw(&format!("graph_{m}")) {
                Some(p) => IntraGraph::read_tsv(resolve(p))?,
                None => IntraGraph::edgeless(tensor.dims()[m]),
            });
            names.push(kv.raw(&format!("name_{m}")).map(str::to_string).unwrap_or_else(|| format!("mode{m}")));
        }
        let mut known: Vec<String> = vec!["tensor".into(), "test".into()];
        known.extend((0..k).flat_map(|m| [format!("graph_{m}"), format!("name_{m}")]));
        let known: Vec<&str> = known.iter().map(String::as_str).collect();
        kv.reject_unknown(&known)?;
        Self::new(tensor, test, graphs, names).map_err(|e| Error::parse(path, 0, e.to_string()))
    }
}

/// Parameters of a planted low-rank hypergraph.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dims: Vec<usize>,
    pub rank: usize,
    pub noise_std: f64,
    /// Fraction of all cells that are observed (train plus held out).
    pub density: f64,
    /// Neighbours per node in the planted-similarity graphs.
    pub knn: usize,
    pub seed: u64,
    /// Fraction of observed cells held out as test entries.
    pub test_fraction: f64,
    pub observed_only: bool,
    /// When set, held-out entries are replaced by labelled hyperedges for this mode: the other
    /// indices are random and the stored index is the ground-truth argmax along this mode.
    pub attribution_mode: Option<usize>,
    pub attribution_edges: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dims: vec![20, 20, 20],
            rank: 3,
            noise_std: 0.0,
            density: 1.0,
            knn: 10,
            seed: 0,
            test_fraction: 0.0,
            observed_only: true,
            attribution_mode: None,
            attribution_edges: 0,
        }
    }
}

const SYNTH_KEYS: &[&str] = &[
    "dims",
    "rank",
    "noise_std",
    "density",
    "knn",
    "seed",
    "test_fraction",
    "observed_only",
    "attribution_mode",
    "attribution_edges",
];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::Invalid("need at least two non-empty modes".into()));
        }
        if self.rank == 0 {
            return Err(Error::Invalid("rank must be at least 1".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Invalid(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Invalid("noise_std must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Invalid("test_fraction must lie in [0, 1)".into()));
        }
        if let Some(m) = self.attribution_mode {
            if m >= self.dims.len() {
                return Err(Error::Invalid(format!("attribution mode {m} >= order {}", self.dims.len())));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let kv = KeyValues::read(path)?;
        kv.reject_unknown(SYNTH_KEYS)?;
        let d = SynthSpec::default();
        let spec = SynthSpec {
            dims: kv.get_list("dims")?.ok_or_else(|| Error::parse(kv.path(), 0, "missing key `dims`"))?,
            rank: kv.require("rank")?,
            noise_std: kv.get("noise_std")?.unwrap_or(d.noise_std),
            density: kv.get("density")?.unwrap_or(d.density),
            knn: kv.get("knn")?.unwrap_or(d.knn),
            seed: kv.get("seed")?.unwrap_or(d.seed),
            test_fraction: kv.get("test_fraction")?.unwrap_or(d.test_fraction),
            observed_only: kv.get("observed_only")?.unwrap_or(d.observed_only),
            attribution_mode: kv.get("attribution_mode")?,
            attribution_edges: kv.get("attribution_edges")?.unwrap_or(d.attribution_edges),
        };
        spec.validate().map_err(|e| Error::parse(kv.path(), 0, e.to_string()))?;
        Ok(spec)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dims={}", join_list(&self.dims));
        let _ = writeln!(s, "rank={}", self.rank);
        let _ = writeln!(s, "noise_std={:?}", self.noise_std);
        let _ = writeln!(s, "density={:?}", self.density);
        let _ = writeln!(s, "knn={}", self.knn);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "test_fraction={:?}", self.test_fraction);
        let _ = writeln!(s, "observed_only={}", self.observed_only);
        if let Some(m) = self.attribution_mode {
            let _ = writeln!(s, "attribution_mode={m}");
            let _ = writeln!(s, "attribution_edges={}", self.attribution_edges);
        }
        s
    }
}

fn unravel(mut lin: usize, dims: &[usize], out: &mut [usize]) {
    for (o, &n) in out.iter_mut().zip(dims).rev() {
        *o = lin % n;
        lin /= n;
    }
}

/// Draws a planted dataset and returns it with its ground-truth factors.
///
/// Ground-truth factors are uniform on `[0, 1)`; each mode's graph is the kNN
/// graph of that mode's ground-truth factor rows.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Dataset, FactorSet)> {
    spec.validate()?;
    let k = spec.dims.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = FactorSet::with_seed(
        spec.dims
            .iter()
            .map(|&n| Array2::from_shape_simple_fn((n, spec.rank), || rng.random::<f64>()))
            .collect(),
        spec.seed,
    )?;

    let cells = spec
        .dims
        .iter()
        .try_fold(1usize, |a, &n| a.checked_mul(n))
        .ok_or_else(|| Error::Invalid("tensor has more cells than fit in usize".into()))?;
    let count = ((spec.density * cells as f64).round() as usize).clamp(1, cells);
    let mut picked: Vec<usize> = if count == cells {
        (0..cells).collect()
    } else {
        index::sample(&mut rng, cells, count).into_vec()
    };
    picked.sort_unstable();
    let n_test = if spec.attribution_mode.is_some() {
        0
    } else {
        (spec.test_fraction * count as f64).round() as usize
    };
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let mut is_test = vec![false; count];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }

    let mut idx = vec![0usize; k];
    let (mut train_c, mut train_v, mut test_c, mut test_v) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (p, &lin) in picked.iter().enumerate() {
        unravel(lin, &spec.dims, &mut idx);
        let mut v = truth.reconstruct_unchecked(&idx);
        if spec.noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            v += spec.noise_std * z;
        }
        if is_test[p] {
            test_c.extend_from_slice(&idx);
            test_v.push(v);
        } else {
            train_c.extend_from_slice(&idx);
            train_v.push(v);
        }
    }

    let mut seen: Vec<Vec<bool>> = spec.dims.iter().map(|&n| vec![false; n]).collect();
    for c in train_c.chunks_exact(k) {
        for (m, &i) in c.iter().enumerate() {
            seen[m][i] = true;
        }
    }
    for (m, s) in seen.iter().enumerate() {
        if let Some(i) = s.iter().position(|&b| !b) {
            return Err(Error::Invalid(format!(
                "density {} leaves row {i} of mode {m} without any observed entry",
                spec.density
            )));
        }
    }

    if let Some(target) = spec.attribution_mode {
        let train_set: HashSet<usize> = picked.iter().copied().collect();
        let mut used = HashSet::new();
        let mut tries = 0usize;
        while test_v.len() < spec.attribution_edges {
            tries += 1;
            if tries > 100 * spec.attribution_edges.max(1) {
                return Err(Error::Invalid("could not place the requested attribution hyperedges".into()));
            }
            for (m, i) in idx.iter_mut().enumerate() {
                *i = if m == target { 0 } else { rng.random_range(0..spec.dims[m]) };
            }
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..spec.dims[target] {
                idx[target] = c;
                let v = truth.reconstruct_unchecked(&idx);
                if v > best.0 {
                    best = (v, c);
                }
            }
            idx[target] = best.1;
            let lin = idx.iter().zip(&spec.dims).fold(0usize, |a, (&i, &n)| a * n + i);
            if train_set.contains(&lin) || !used.insert(lin) {
                continue;
            }
            test_c.extend_from_slice(&idx);
            test_v.push(1.0);
        }
    }

    let tensor = SparseTensor::from_parts(spec.dims.clone(), train_c, train_v, spec.observed_only)?;
    let test = SparseTensor::from_parts(spec.dims.clone(), test_c, test_v, spec.observed_only)?;
    let graphs = truth
        .factors()
        .iter()
        .map(|a| knn_graph(a.view(), spec.knn.min(a.nrows() - 1)))
        .collect::<Result<Vec<_>>>()?;
    let names = (0..k).map(|m| format!("mode{m}")).collect();
    Ok((Dataset::new(tensor, test, graphs, names)?, truth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovieLensOptions {
    pub users: usize,
    pub items: usize,
    /// Fraction of ratings kept for training.
    pub split_fraction: f64,
    /// Neighbours per node in the user and item graphs.
    pub k: usize,
    pub seed: u64,
}

impl Default for MovieLensOptions {
    fn default() -> Self {
        MovieLensOptions {
            users: 943,
            items: 1682,
            split_fraction: 0.8,
            k: 10,
            seed: 0,
        }
    }
}

/// Parses `user \t item \t rating \t timestamp` lines with 1-based ids.
pub fn parse_udata(text: &str, path: &Path, users: usize, items: usize) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(path, ln + 1, format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let id = |s: &str, limit: usize, what: &str| -> Result<usize> {
            let v: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, ln + 1, format!("bad {what} id `{s}`")))?;
            if v == 0 || v > limit {
                return Err(Error::parse(path, ln + 1, format!("{what} id {v} outside 1..={limit}")));
            }
            Ok(v - 1)
        };
        let u = id(f[0], users, "user")?;
        let i = id(f[1], items, "item")?;
        let r: f64 = f[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, ln + 1, format!("bad rating `{}`", f[2])))?;
        f[3].trim()
            .parse::<u64>()
            .map_err(|_| Error::parse(path, ln + 1, format!("bad timestamp `{}`", f[3])))?;
        if !seen.insert((u, i)) {
            return Err(Error::parse(path, ln + 1, format!("duplicate rating for user {} item {}", u + 1, i + 1)));
        }
        out.push((u, i, r));
    }
    Ok(out)
}

/// Mean-centred, unit-normalized rating rows: Euclidean kNN on these is cosine kNN.
fn rating_features(ratings: &[(usize, usize, f64)], rows: usize, cols: usize, by_user: bool) -> Array2<f64> {
    let mut f = Array2::<f64>::zeros((rows, cols));
    let mut sum = vec![0.0; rows];
    let mut cnt = vec![0usize; rows];
    for &(u, i, r) in ratings {
        let (a, b) = if by_user { (u, i) } else { (i, u) };
        f[[a, b]] = r;
        sum[a] += r;
        cnt[a] += 1;
    }
    for &(u, i, _) in ratings {
        let (a, b) = if by_user { (u, i) } else { (i, u) };
        f[[a, b]] -= sum[a] / cnt[a] as f64;
    }
    for mut row in f.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    f
}

/// Loads MovieLens `u.data`, splits it, and builds cosine kNN user and item graphs from the training ratings.
pub fn load_movielens(path: impl AsRef<Path>, opts: &MovieLensOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    movielens_from_str(&text, path, opts)
}

pub fn movielens_from_str(text: &str, path: &Path, opts: &MovieLensOptions) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&opts.split_fraction) {
        return Err(Error::Invalid("split_fraction must lie in [0, 1]".into()));
    }
    let mut ratings = parse_udata(text, path, opts.users, opts.items)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    ratings.shuffle(&mut rng);
    let n_train = (opts.split_fraction * ratings.len() as f64).round() as usize;
    let (train, test) = ratings.split_at(n_train);
    let to_tensor = |rs: &[(usize, usize, f64)]| {
        SparseTensor::new(
            vec![opts.users, opts.items],
            rs.iter().map(|&(u, i, r)| (vec![u, i], r)).collect(),
            true,
        )
    };
    let user_graph = knn_graph(rating_features(train, opts.users, opts.items, true).view(), opts.k)?;
    let item_graph = knn_graph(rating_features(train, opts.items, opts.users, false).view(), opts.k)?;
    Dataset::new(
        to_tensor(train)?,
        to_tensor(test)?,
        vec![user_graph, item_graph],
        vec!["users".into(), "items".into()],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_count_follows_density() {
        let spec = SynthSpec {
            dims: vec![20, 20, 20],
            density: 0.1,
            ..Default::default()
        };
        let (ds, _) = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.tensor.nnz(), 800);
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SynthSpec {
            dims: vec![8, 7, 6],
            density: 0.4,
            noise_std: 0.1,
            test_fraction: 0.2,
            knn: 3,
            seed: 11,
            ..Default::default()
        };
        let (a, ta) = generate_synthetic(&spec).unwrap();
        let (b, tb) = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_synthetic(&SynthSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.tensor, c.tensor);
    }

    #[test]
    fn sparse_density_is_rejected_when_rows_go_missing() {
        let spec = SynthSpec {
            dims: vec![50, 50],
            density: 0.001,
            knn: 3,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Invalid(_))));
    }

    #[test]
    fn noiseless_full_density_matches_truth() {
        let spec = SynthSpec {
            dims: vec![4, 3, 5],
            rank: 2,
            knn: 2,
            ..Default::default()
        };
        let (ds, truth) = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.tensor.nnz(), 60);
        for (idx, v) in ds.tensor.iter() {
            assert_eq!(v, truth.reconstruct_unchecked(idx));
        }
        assert!(ds.graphs.iter().all(|g| g.edge_count() > 0));
    }

    #[test]
    fn attribution_edges_carry_argmax_labels() {
        let spec = SynthSpec {
            dims: vec![6, 9, 8],
            rank: 2,
            density: 0.3,
            knn: 2,
            attribution_mode: Some(0),
            attribution_edges: 10,
            ..Default::default()
        };
        let (ds, truth) = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.test.nnz(), 10);
        for (idx, _) in ds.test.iter() {
            let mut probe = idx.to_vec();
            let best = truth.reconstruct_unchecked(idx);
            for c in 0..6 {
                probe[0] = c;
                assert!(truth.reconstruct_unchecked(&probe) <= best);
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            dims: vec![5, 4, 3],
            rank: 2,
            density: 0.6,
            test_fraction: 0.25,
            knn: 2,
            ..Default::default()
        };
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let manifest = ds.write(dir.path()).unwrap();
        assert_eq!(Dataset::load_manifest(&manifest).unwrap(), ds);
    }

    #[test]
    fn udata_parsing_and_split() {
        let text = "1\t1\t5\t881250949\n1\t2\t3\t881250949\n2\t1\t4\t881250949\n2\t3\t1\t881250949\n3\t2\t2\t1\n";
        let opts = MovieLensOptions {
            users: 3,
            items: 3,
            split_fraction: 1.0,
            k: 1,
            seed: 3,
        };
        let ds = movielens_from_str(text, Path::new("u.data"), &opts).unwrap();
        assert_eq!(ds.tensor.dims(), &[3, 3]);
        assert_eq!(ds.tensor.nnz(), 5);
        assert!(ds.test.is_empty());
        assert!(ds.tensor.observed_only());

        let half = MovieLensOptions {
            split_fraction: 0.6,
            ..opts.clone()
        };
        let a = movielens_from_str(text, Path::new("u.data"), &half).unwrap();
        let b = movielens_from_str(text, Path::new("u.data"), &half).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tensor.nnz() + a.test.nnz(), 5);

        let bad = "1\t4\t5\t0\n";
        match movielens_from_str(bad, Path::new("u.data"), &opts) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(movielens_from_str("1\t1\t5\n", Path::new("u.data"), &opts).is_err());
    }
}
