//! Time Gauss-Seidel against Jacobi rounds on the same problem.
//!
//! Jacobi runs one thread per mode, so its advantage only shows with at least K cores.
//! Pass the mode size as the first argument (default 200).

use std::time::Instant;

use hyperlearn::data::{generate_synthetic, SynthSpec};
use hyperlearn::distributed::{Sweep, TrainPlan, Trainer};
use hyperlearn::FactorSet;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> hyperlearn::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let spec = SynthSpec {
        dims: vec![n, n, n / 2],
        rank: 8,
        noise_std: 0.1,
        density: (2e5 / (n * n * (n / 2)) as f64).min(1.0),
        knn: 5,
        seed: 3,
        ..Default::default()
    };
    let t = Instant::now();
    let (data, _) = generate_synthetic(&spec)?;
    println!("{} entries generated in {:.1?}", data.tensor.nnz(), t.elapsed());
    println!("cores available: {}", std::thread::available_parallelism().map_or(1, |c| c.get()));

    for sweep in [Sweep::GaussSeidel, Sweep::Jacobi] {
        let plan = TrainPlan {
            rank: spec.rank,
            sweep,
            seed: 1,
            ..Default::default()
        };
        let mut trainer = Trainer::new(&data.tensor, &data.graphs, &plan)?;
        let mut fs = FactorSet::init(&spec.dims, plan.rank, plan.seed)?;
        let logs: Vec<_> = (0..10).map(|_| trainer.run_round(&mut fs)).collect::<Result<_, _>>()?;
        let per_mode: Vec<String> = (0..3)
            .map(|m| format!("{:.1}", median(logs.iter().map(|l| l.mode_ms[m]).collect())))
            .collect();
        println!(
            "{sweep:>12}: median round {:.1} ms, per mode [{}] ms, loss {:.4e}",
            median(logs.iter().map(|l| l.round_ms).collect()),
            per_mode.join(", "),
            logs.last().unwrap().loss.total
        );
    }
    Ok(())
}
