//! MovieLens-100k rating prediction with kNN user/item graphs versus the edgeless (λ-only) ablation.
//!
//! ```text
//! cargo run --release --example movielens -- path/to/ml-100k/u.data
//! ```
//!
//! Without an argument a synthetic stand-in in the same `u.data` format is generated, so the
//! pipeline can be exercised offline. Its numbers say nothing about the real dataset.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use hyperlearn::data::{load_movielens, movielens_from_str, Dataset, MovieLensOptions};
use hyperlearn::distributed::{run_training, TrainPlan};
use hyperlearn::eval::predictions;
use hyperlearn::{rmse, FactorSet};

/// 100k ratings from a rank-5 taste model, rounded and clipped to 1..=5.
fn stand_in_udata(opts: &MovieLensOptions) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let dim = 5;
    let mut draw = |n: usize| -> Vec<f64> { (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect() };
    let (u, v) = (draw(opts.users), draw(opts.items));
    let mut out = String::new();
    for (n, cell) in index::sample(&mut rng, opts.users * opts.items, 100_000).into_iter().enumerate() {
        let (i, j) = (cell / opts.items, cell % opts.items);
        let dot: f64 = (0..dim).map(|r| u[i * dim + r] * v[j * dim + r]).sum();
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5;
        let rating = (3.5 + 2.0 * dot + noise).round().clamp(1.0, 5.0);
        let _ = writeln!(out, "{}\t{}\t{}\t{}", i + 1, j + 1, rating, 880_000_000 + n);
    }
    out
}

fn fit(data: &Dataset, plan: &TrainPlan) -> hyperlearn::Result<(f64, usize)> {
    let init = FactorSet::init(data.tensor.dims(), plan.rank, plan.seed)?;
    let (fs, logs) = run_training(&data.tensor, &init, &data.graphs, plan)?;
    Ok((rmse(&predictions(&data.test, &fs)?)?, logs.len()))
}

fn main() -> hyperlearn::Result<()> {
    let opts = MovieLensOptions::default();
    let data = match std::env::args().nth(1) {
        Some(path) => load_movielens(&path, &opts)?,
        None => {
            eprintln!("no u.data given; using a synthetic stand-in");
            movielens_from_str(&stand_in_udata(&opts), Path::new("<stand-in>"), &opts)?
        }
    };
    let plan = TrainPlan {
        rank: 10,
        lambda: 1.0,
        max_rounds: 100,
        rel_tol: 1e-6,
        ..Default::default()
    };
    let (graph_rmse, rounds) = fit(&data, &plan)?;
    let (plain_rmse, plain_rounds) = fit(&data.without_graphs(), &plan)?;
    println!("train {} / test {} ratings", data.tensor.nnz(), data.test.nnz());
    println!("kNN graphs   test RMSE {graph_rmse:.4} ({rounds} rounds)");
    println!("edgeless     test RMSE {plain_rmse:.4} ({plain_rounds} rounds)");
    println!("ratio {:.4}", graph_rmse / plain_rmse);
    Ok(())
}
