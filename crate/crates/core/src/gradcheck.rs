//! Finite-difference checks of the analytic objective and refiner gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::factor::FactorSet;
use crate::graph::IntraGraph;
use crate::mgcnn::{refiner_loss, refiner_loss_and_grad, MGCNNModel, RefinerConfig};
use crate::objective::Objective;
use crate::sptensor::SparseTensor;

/// Entries smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Difference step for the objective check.
pub const OBJECTIVE_STEP: f64 = 1e-5;

/// Difference step for the refiner check; smaller steps drown its tiny entries in rounding noise.
pub const REFINER_STEP: f64 = 1e-4;

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// A random small instance: tensor, graphs and factors.
pub struct Instance {
    pub tensor: SparseTensor,
    pub graphs: Vec<IntraGraph>,
    pub factors: FactorSet,
    pub lambda: f64,
}

pub fn random_instance(rng: &mut impl Rng, order: usize, rank: usize, observed_only: bool) -> Result<Instance> {
    let dims: Vec<usize> = (0..order).map(|_| rng.random_range(2..=5)).collect();
    let cells: usize = dims.iter().product();
    let mut entries = Vec::new();
    let mut idx = vec![0usize; order];
    for lin in 0..cells {
        let mut rest = lin;
        for (i, &n) in idx.iter_mut().zip(&dims).rev() {
            *i = rest % n;
            rest /= n;
        }
        if rng.random_bool(0.5) {
            entries.push((idx.clone(), rng.sample::<f64, _>(StandardNormal)));
        }
    }
    let tensor = SparseTensor::new(dims.clone(), entries, observed_only)?;
    let graphs = dims
        .iter()
        .map(|&n| {
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(0.5) {
                        edges.push((i, j, rng.random_range(0.5..2.0)));
                    }
                }
            }
            IntraGraph::from_edges(n, &edges)
        })
        .collect::<Result<Vec<_>>>()?;
    let factors = FactorSet::new(
        dims.iter()
            .map(|&n| Array2::from_shape_simple_fn((n, rank), || rng.sample::<f64, _>(StandardNormal) * 0.7))
            .collect(),
    )?;
    Ok(Instance {
        tensor,
        graphs,
        factors,
        lambda: rng.random_range(0.1..2.0),
    })
}

/// Analytic `grad_mode` against central differences of `mode_loss`, every mode, every entry.
pub fn objective_suite(seed: u64, instances: usize, h: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..instances {
        let order = 2 + case % 3;
        let rank = rng.random_range(1..=3);
        let inst = random_instance(&mut rng, order, rank, case % 2 == 0)?;
        let obj = Objective::new(&inst.tensor, &inst.graphs, inst.lambda)?;
        for mode in 0..order {
            let analytic = obj.grad_mode(&inst.factors, mode)?;
            let x0: Vec<f64> = inst.factors.factor(mode).iter().copied().collect();
            let shape = inst.factors.factor(mode).dim();
            let mut fs = inst.factors.clone();
            let numeric = central_difference(
                |x| {
                    fs.set_factor(mode, Array2::from_shape_vec(shape, x.to_vec()).expect("shape"))
                        .expect("shape");
                    obj.mode_loss(&fs, mode).expect("consistent instance")
                },
                &x0,
                h,
            );
            for (a, n) in analytic.iter().zip(&numeric) {
                worst = worst.max(relative_error(*a, *n));
            }
        }
    }
    Ok(SuiteReport {
        name: "objective",
        cases: instances,
        max_rel_err: worst,
        tolerance: 1e-5,
    })
}

/// A tiny refiner whose read-out is non-zero, so every parameter affects the loss.
pub fn random_refiner(rng: &mut impl Rng, modes: usize, rank: usize, shared: bool) -> Result<MGCNNModel> {
    let cfg = RefinerConfig {
        degree: 2,
        channels: 2,
        hidden: 4,
        steps: 2,
        shared_cell: shared,
        seed: rng.random(),
        ..Default::default()
    };
    let mut model = MGCNNModel::init(modes, rank, &cfg)?;
    for m in 0..if shared { 1 } else { modes } {
        let cell = model.cell_mut(m);
        let w = Array2::from_shape_simple_fn((rank, 4), || rng.random_range(-0.5..0.5));
        let b = ndarray::Array1::from_shape_simple_fn(rank, || rng.random_range(-0.1..0.1));
        cell.set_readout(w, b)?;
    }
    Ok(model)
}

/// Unrolled refiner gradients against central differences of the refined joint loss.
pub fn refiner_suite(seed: u64, instances: usize, h: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..instances {
        let inst = random_instance(&mut rng, 2, 2, case % 2 == 0)?;
        let obj = Objective::new(&inst.tensor, &inst.graphs, inst.lambda)?;
        let mut model = random_refiner(&mut rng, 2, 2, case % 3 == 0)?;
        let (_, analytic) = refiner_loss_and_grad(&obj, &inst.factors, &model)?;
        let p0 = model.params();
        let numeric = central_difference(
            |p| {
                model.set_params(p).expect("length");
                refiner_loss(&obj, &inst.factors, &model).expect("finite")
            },
            &p0,
            h,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    Ok(SuiteReport {
        name: "refiner",
        cases: instances,
        max_rel_err: worst,
        tolerance: 1e-4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|v| v[0] * v[0] + 3.0 * v[0] * v[1], &[1.0, 2.0], 1e-5);
        assert!((g[0] - 8.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn suites_pass() {
        assert!(objective_suite(1, 6, OBJECTIVE_STEP).unwrap().passed());
        let r = refiner_suite(2, 3, REFINER_STEP).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
