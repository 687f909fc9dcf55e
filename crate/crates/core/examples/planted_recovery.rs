//! Plant a noiseless rank-3 tensor, fully observed, and recover it with Gauss-Seidel.

use hyperlearn::data::{generate_synthetic, SynthSpec};
use hyperlearn::distributed::{run_training, TrainPlan};
use hyperlearn::FactorSet;

fn main() -> hyperlearn::Result<()> {
    let spec = SynthSpec {
        dims: vec![20, 20, 20],
        rank: 3,
        observed_only: false,
        seed: 7,
        ..Default::default()
    };
    let (data, truth) = generate_synthetic(&spec)?;
    let plan = TrainPlan {
        rank: 3,
        // recon dominates: the graphs only nudge the factors
        lambda: 1e3,
        max_rounds: 500,
        rel_tol: 1e-12,
        seed: 1,
        ..Default::default()
    };
    let init = FactorSet::init(&spec.dims, plan.rank, plan.seed)?;
    let (fs, logs) = run_training(&data.tensor, &init, &data.graphs, &plan)?;

    let norm = data.tensor.sq_norm().sqrt();
    let err = hyperlearn::masked_sq_error(&data.tensor, &fs)?.sqrt() / norm;
    for l in logs.iter().step_by(25) {
        println!("round {:4}  loss {:.6e}", l.round, l.loss.total);
    }
    println!("rounds {}", logs.len());
    println!("relative reconstruction error {err:.3e}");
    println!(
        "ground truth relative error     {:.3e}",
        hyperlearn::masked_sq_error(&data.tensor, &truth)?.sqrt() / norm
    );
    Ok(())
}
