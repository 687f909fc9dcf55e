//! Train factors briefly, then let the Chebyshev + LSTM refiner diffuse them.

use hyperlearn::data::{generate_synthetic, SynthSpec};
use hyperlearn::distributed::{run_training, TrainPlan};
use hyperlearn::mgcnn::diffuse_all;
use hyperlearn::{train_refiner, FactorSet, MGCNNModel, Objective, RefinerConfig};

fn main() -> hyperlearn::Result<()> {
    let spec = SynthSpec {
        dims: vec![25, 20, 15],
        rank: 2,
        noise_std: 0.1,
        density: 0.3,
        knn: 4,
        seed: 2,
        test_fraction: 0.2,
        ..Default::default()
    };
    let (data, _) = generate_synthetic(&spec)?;
    let plan = TrainPlan {
        rank: 2,
        max_rounds: 20,
        seed: 1,
        ..Default::default()
    };
    let init = FactorSet::init(&spec.dims, plan.rank, plan.seed)?;
    let (fs, _) = run_training(&data.tensor, &init, &data.graphs, &plan)?;

    let objective = Objective::new(&data.tensor, &data.graphs, plan.lambda)?;
    let model = MGCNNModel::init(3, plan.rank, &RefinerConfig::default())?;
    println!("refiner parameters: {}", model.param_count());
    let (model, report) = train_refiner(&objective, &fs, &model, 200)?;
    for (e, l) in report.losses.iter().enumerate().step_by(40) {
        println!("epoch {e:3}  loss {l:.6}");
    }
    let refined = diffuse_all(&objective, &fs, &model)?.0;

    let rmse = |f: &FactorSet| hyperlearn::eval::predictions(&data.test, f).and_then(|p| hyperlearn::rmse(&p));
    println!("loss  before {:.6}  after {:.6}", report.losses[0], report.losses.last().unwrap());
    println!("test rmse before {:.4}  after {:.4}", rmse(&fs)?, rmse(&refined)?);
    Ok(())
}
