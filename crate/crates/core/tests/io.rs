use std::collections::HashSet;
use std::path::Path;

use hyperlearn::data::{movielens_from_str, parse_udata};
use hyperlearn::{
    generate_synthetic, Dataset, FactorSet, IntraGraph, MGCNNModel, MovieLensOptions, RefinerConfig, SparseTensor,
    Sweep, SynthSpec, TrainPlan,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(seed: u64) -> SynthSpec {
    SynthSpec {
        dims: vec![7, 6, 5],
        rank: 2,
        noise_std: 0.3,
        density: 0.6,
        knn: 3,
        seed,
        test_fraction: 0.25,
        ..Default::default()
    }
}

#[test]
fn dataset_round_trips_through_a_manifest() {
    let (data, _) = generate_synthetic(&spec(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = data.write(dir.path()).unwrap();
    assert_eq!(Dataset::load_manifest(&manifest).unwrap(), data);
}

#[test]
fn manifest_defaults_missing_graphs_to_edgeless() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.tsv"), "#dims 2 3 observed\n0\t1\t1.5\n1\t2\t-2\n").unwrap();
    std::fs::write(dir.path().join("m.txt"), "tensor=t.tsv\n").unwrap();
    let data = Dataset::load_manifest(dir.path().join("m.txt")).unwrap();
    assert_eq!(data.graphs.iter().map(IntraGraph::edge_count).collect::<Vec<_>>(), vec![0, 0]);
    assert!(data.test.is_empty());
    assert_eq!(data.names, vec!["mode0", "mode1"]);
}

#[test]
fn manifest_rejects_unknown_keys_and_overlapping_splits() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.tsv"), "#dims 2 3 observed\n0\t1\t1.5\n").unwrap();
    std::fs::write(dir.path().join("m.txt"), "tensor=t.tsv\ntensors=t.tsv\n").unwrap();
    assert!(Dataset::load_manifest(dir.path().join("m.txt")).is_err());
    std::fs::write(dir.path().join("m.txt"), "tensor=t.tsv\ntest=t.tsv\n").unwrap();
    assert!(Dataset::load_manifest(dir.path().join("m.txt")).is_err());
}

#[test]
fn tensor_tsv_round_trips_and_keeps_the_loss_kind() {
    for observed in [true, false] {
        let (data, _) = generate_synthetic(&SynthSpec { observed_only: observed, ..spec(2) }).unwrap();
        let text = data.tensor.to_tsv_string();
        let back = SparseTensor::parse_tsv(&text, Path::new("x.tsv")).unwrap();
        assert_eq!(back, data.tensor);
        assert_eq!(back.observed_only(), observed);
    }
}

#[test]
fn tensor_tsv_errors_name_the_line() {
    let bad = "#dims 2 3 observed\n0\t1\t1.5\n0\t3\t2.0\n";
    let err = SparseTensor::parse_tsv(bad, Path::new("x.tsv")).unwrap_err().to_string();
    assert!(err.contains("x.tsv") && err.contains('3'), "{err}");
    assert!(SparseTensor::parse_tsv("#dims 2 3 observed\n0\t1\tnan\n", Path::new("x.tsv")).is_err());
    assert!(SparseTensor::parse_tsv("#dims 2 3 observed\n0\t1\n", Path::new("x.tsv")).is_err());
}

#[test]
fn graph_tsv_round_trips() {
    let g = IntraGraph::from_edges(6, &[(0, 1, 1.0), (1, 2, 0.25), (4, 5, 3.5), (0, 5, 1e-3)]).unwrap();
    let back = IntraGraph::parse_tsv(&g.to_tsv_string(), Path::new("g.tsv")).unwrap();
    assert_eq!(back.adjacency(), g.adjacency());
    assert_eq!(back.laplacian(), g.laplacian());
}

#[test]
fn factor_checkpoint_round_trips_bitwise() {
    let fs = FactorSet::init(&[5, 4, 3, 2], 3, 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.tsv");
    fs.write_checkpoint(&path).unwrap();
    // the header is `#factors K R`, so only the matrices travel
    assert_eq!(FactorSet::read_checkpoint(&path).unwrap().factors(), fs.factors());
}

#[test]
fn refiner_checkpoint_round_trips_bitwise() {
    for shared_cell in [false, true] {
        let cfg = RefinerConfig {
            shared_cell,
            seed: 5,
            ..Default::default()
        };
        let mut model = MGCNNModel::init(3, 4, &cfg).unwrap();
        // perturb everything so the zero read-out is not what gets round-tripped
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params: Vec<f64> = model.params().iter().map(|p| p + rng.random_range(-1.0..1.0)).collect();
        model.set_params(&params).unwrap();
        let back = MGCNNModel::parse_checkpoint(&model.to_checkpoint_string(), Path::new("m.txt")).unwrap();
        assert_eq!(back, model);
    }
}

#[test]
fn plan_and_synth_spec_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let plan = TrainPlan {
        rank: 7,
        lambda: 0.125,
        sweep: Sweep::Jacobi,
        step: 3e-3,
        barrier_search: true,
        reg_weights: vec![1.0, 0.5, 2.0],
        frozen: vec![2],
        ..Default::default()
    };
    let p = dir.path().join("plan.txt");
    std::fs::write(&p, plan.to_kv_string()).unwrap();
    let back = TrainPlan::read(&p).unwrap();
    assert_eq!(back, plan);
    assert_eq!(back.fingerprint(), plan.fingerprint());

    let s = SynthSpec {
        attribution_mode: Some(1),
        attribution_edges: 40,
        ..spec(3)
    };
    let p = dir.path().join("synth.txt");
    std::fs::write(&p, s.to_kv_string()).unwrap();
    assert_eq!(SynthSpec::read(&p).unwrap(), s);
}

#[test]
fn plan_requires_rank_and_rejects_typos() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("plan.txt");
    std::fs::write(&p, "lambda=1\n").unwrap();
    assert!(TrainPlan::read(&p).is_err());
    std::fs::write(&p, "rank=2\nlamda=1\n").unwrap();
    assert!(TrainPlan::read(&p).is_err());
    std::fs::write(&p, "rank=2\nsweep=sideways\n").unwrap();
    assert!(TrainPlan::read(&p).is_err());
}

#[test]
fn udata_lines_parse_to_zero_based_triples() {
    let text = "1\t2\t5\t881250949\n3\t1\t1\t891717742\n\n2\t3\t4\t878887116\n";
    let got = parse_udata(text, Path::new("u.data"), 3, 3).unwrap();
    assert_eq!(got, vec![(0, 1, 5.0), (2, 0, 1.0), (1, 2, 4.0)]);
}

#[test]
fn udata_rejects_bad_rows() {
    let p = Path::new("u.data");
    for bad in [
        "1\t2\t5\n",
        "0\t2\t5\t1\n",
        "4\t2\t5\t1\n",
        "1\tx\t5\t1\n",
        "1\t2\t5\tnow\n",
        "1\t2\t5\t1\n1\t2\t3\t2\n",
    ] {
        assert!(parse_udata(bad, p, 3, 3).is_err(), "{bad:?}");
    }
}

fn toy_udata(users: usize, items: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::new();
    for u in 1..=users {
        for i in 1..=items {
            if rng.random_bool(0.6) {
                s.push_str(&format!("{u}\t{i}\t{}\t{}\n", rng.random_range(1..=5), 880000000 + u * items + i));
            }
        }
    }
    s
}

#[test]
fn movielens_split_is_disjoint_and_complete() {
    let text = toy_udata(20, 15, 0);
    let total = text.lines().count();
    for seed in 0..4 {
        let opts = MovieLensOptions {
            users: 20,
            items: 15,
            k: 3,
            seed,
            ..Default::default()
        };
        let d = movielens_from_str(&text, Path::new("u.data"), &opts).unwrap();
        assert_eq!(d.tensor.nnz() + d.test.nnz(), total);
        assert_eq!(d.test.nnz(), total - (0.8 * total as f64).round() as usize);
        let train: HashSet<Vec<usize>> = d.tensor.iter().map(|(i, _)| i.to_vec()).collect();
        assert!(d.test.iter().all(|(i, _)| !train.contains(i)));
        assert!(d.tensor.observed_only());
        assert_eq!(d.graphs[0].n(), 20);
        assert_eq!(d.graphs[1].n(), 15);
    }
}

#[test]
fn movielens_split_depends_only_on_the_seed() {
    let text = toy_udata(12, 10, 1);
    let opts = MovieLensOptions {
        users: 12,
        items: 10,
        k: 2,
        seed: 9,
        ..Default::default()
    };
    let a = movielens_from_str(&text, Path::new("u.data"), &opts).unwrap();
    let b = movielens_from_str(&text, Path::new("u.data"), &opts).unwrap();
    assert_eq!(a, b);
    let c = movielens_from_str(&text, Path::new("u.data"), &MovieLensOptions { seed: 10, ..opts }).unwrap();
    assert_ne!(a.test, c.test);
}

#[test]
fn generator_is_deterministic_per_seed() {
    let (a, ta) = generate_synthetic(&spec(4)).unwrap();
    let (b, tb) = generate_synthetic(&spec(4)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let (c, _) = generate_synthetic(&spec(5)).unwrap();
    assert_ne!(a.tensor, c.tensor);
}

#[test]
fn generator_holds_out_a_disjoint_test_split() {
    let s = spec(6);
    let (d, _) = generate_synthetic(&s).unwrap();
    let cells: usize = s.dims.iter().product();
    let observed = d.tensor.nnz() + d.test.nnz();
    assert_eq!(observed, (s.density * cells as f64).round() as usize);
    let train: HashSet<Vec<usize>> = d.tensor.iter().map(|(i, _)| i.to_vec()).collect();
    assert!(d.test.iter().all(|(i, _)| !train.contains(i)));
    for m in 0..3 {
        let rows: HashSet<usize> = d.tensor.iter().map(|(i, _)| i[m]).collect();
        assert_eq!(rows.len(), s.dims[m], "mode {m} has an unobserved row");
    }
}
