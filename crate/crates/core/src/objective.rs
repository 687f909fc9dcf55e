//! Graph-regularized CP objective and its per-mode gradients.
//!
//! ```text
//! total   = ½ Σ_θ w_θ tr(A_θᵀ L_θ A_θ) + λ ‖X − [[A_1, .., A_K]]‖²
//! mode_θ  = λ ‖X − [[A_1, .., A_K]]‖² + ½ w_θ tr(A_θᵀ L_θ A_θ)
//! ```
//!
//! The reconstruction term is masked to stored cells when the tensor is
//! `observed_only`. Since the other regularizers do not depend on `A_θ`, the
//! gradient of `mode_θ` is also the gradient of `total` with respect to `A_θ`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::factor::{gram_hadamard, mttkrp_with_values, FactorSet};
use crate::graph::IntraGraph;
use crate::sptensor::{check_compatible, sq_error_unchecked, SparseTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// `½ w_θ tr(A_θᵀ L_θ A_θ)` per mode.
    pub reg_terms: Vec<f64>,
    pub recon: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(reg_terms: Vec<f64>, recon: f64, lambda: f64) -> Self {
        let total = lambda * recon + reg_terms.iter().sum::<f64>();
        LossBreakdown {
            reg_terms,
            recon,
            lambda,
            total,
        }
    }
}

/// The data, graphs and weights the loss is evaluated against.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    tensor: &'a SparseTensor,
    graphs: &'a [IntraGraph],
    lambda: f64,
    reg_weights: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(tensor: &'a SparseTensor, graphs: &'a [IntraGraph], lambda: f64) -> Result<Self> {
        if graphs.len() != tensor.order() {
            return Err(Error::Shape(format!(
                "{} graphs for a tensor of order {}",
                graphs.len(),
                tensor.order()
            )));
        }
        for (m, (g, &n)) in graphs.iter().zip(tensor.dims()).enumerate() {
            if g.n() != n {
                return Err(Error::Shape(format!("graph {m} has {} nodes, mode size is {n}", g.n())));
            }
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Invalid(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        Ok(Objective {
            tensor,
            graphs,
            lambda,
            reg_weights: vec![1.0; tensor.order()],
        })
    }

    /// Per-mode multipliers on the trace regularizers (default all 1).
    pub fn with_reg_weights(mut self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.tensor.order() {
            return Err(Error::Shape(format!(
                "{} regularizer weights for order {}",
                weights.len(),
                self.tensor.order()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid("regularizer weights must be finite and non-negative".into()));
        }
        self.reg_weights = weights.to_vec();
        Ok(self)
    }

    pub fn tensor(&self) -> &'a SparseTensor {
        self.tensor
    }

    pub fn graphs(&self) -> &'a [IntraGraph] {
        self.graphs
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn reg_weights(&self) -> &[f64] {
        &self.reg_weights
    }

    pub fn order(&self) -> usize {
        self.tensor.order()
    }

    fn check(&self, fs: &FactorSet) -> Result<()> {
        check_compatible(self.tensor, fs)
    }

    fn check_mode(&self, fs: &FactorSet, mode: usize) -> Result<()> {
        self.check(fs)?;
        if mode >= self.order() {
            return Err(Error::Index(format!("mode {mode} >= order {}", self.order())));
        }
        Ok(())
    }

    /// `½ w_θ tr(AᵀLA)` for one factor matrix.
    pub fn reg_term(&self, mode: usize, a: &Array2<f64>) -> f64 {
        let la = self.graphs[mode]
            .laplacian()
            .dot_dense(&a.view())
            .expect("graph size matches factor rows");
        0.5 * self.reg_weights[mode] * (a * &la).sum()
    }

    pub fn recon(&self, fs: &FactorSet) -> Result<f64> {
        self.check(fs)?;
        Ok(sq_error_unchecked(self.tensor, fs))
    }

    pub fn total_loss(&self, fs: &FactorSet) -> Result<LossBreakdown> {
        self.check(fs)?;
        let reg = (0..self.order()).map(|m| self.reg_term(m, fs.factor(m))).collect();
        let recon = sq_error_unchecked(self.tensor, fs);
        Ok(LossBreakdown::new(reg, recon, self.lambda))
    }

    pub fn mode_loss(&self, fs: &FactorSet, mode: usize) -> Result<f64> {
        self.check_mode(fs, mode)?;
        Ok(self.lambda * sq_error_unchecked(self.tensor, fs) + self.reg_term(mode, fs.factor(mode)))
    }

    /// Gradient of [`Self::mode_loss`] with respect to `A_mode`.
    pub fn grad_mode(&self, fs: &FactorSet, mode: usize) -> Result<Array2<f64>> {
        self.check_mode(fs, mode)?;
        let a = fs.factor(mode);
        let mut g = self.graphs[mode]
            .laplacian()
            .dot_dense(&a.view())
            .expect("graph size matches factor rows");
        g *= self.reg_weights[mode];
        if self.lambda == 0.0 {
            return Ok(g);
        }
        let x = self.tensor;
        if x.observed_only() {
            let residual: Vec<f64> = x.iter().map(|(idx, v)| fs.reconstruct_unchecked(idx) - v).collect();
            let m = mttkrp_with_values(x, &residual, fs, mode);
            g.scaled_add(2.0 * self.lambda, &m);
        } else {
            let gram = gram_hadamard(fs, mode)?;
            let mut d = a.dot(&gram);
            d -= &mttkrp_with_values(x, x.values(), fs, mode);
            g.scaled_add(2.0 * self.lambda, &d);
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn binary_tensor() -> SparseTensor {
        SparseTensor::new(
            vec![2, 3, 2],
            vec![(vec![0, 0, 0], 1.0), (vec![1, 2, 1], 1.0), (vec![0, 1, 1], 1.0)],
            true,
        )
        .unwrap()
    }

    #[test]
    fn zero_factors_give_data_norm() {
        let x = binary_tensor();
        let graphs = vec![
            IntraGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap(),
            IntraGraph::edgeless(3),
            IntraGraph::edgeless(2),
        ];
        let obj = Objective::new(&x, &graphs, 0.7).unwrap();
        let fs = FactorSet::zeros(&[2, 3, 2], 2).unwrap();
        let l = obj.total_loss(&fs).unwrap();
        assert_eq!(l.reg_terms, vec![0.0, 0.0, 0.0]);
        assert_eq!(l.recon, 3.0);
        assert_eq!(l.total, 0.7 * 3.0);
    }

    #[test]
    fn edgeless_graphs_have_no_regularizer() {
        let x = binary_tensor();
        let graphs: Vec<_> = x.dims().iter().map(|&n| IntraGraph::edgeless(n)).collect();
        let obj = Objective::new(&x, &graphs, 2.0).unwrap();
        let fs = FactorSet::init(x.dims(), 3, 1).unwrap();
        let l = obj.total_loss(&fs).unwrap();
        assert!(l.reg_terms.iter().all(|&r| r == 0.0));
        assert_eq!(l.total, 2.0 * l.recon);
    }

    #[test]
    fn single_edge_quadratic_form() {
        let x = SparseTensor::new(vec![2, 1], vec![], true).unwrap();
        let graphs = vec![
            IntraGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap(),
            IntraGraph::edgeless(1),
        ];
        let obj = Objective::new(&x, &graphs, 0.0).unwrap();
        let fs = FactorSet::new(vec![array![[1.0], [-1.0]], array![[0.3]]]).unwrap();
        let l = obj.total_loss(&fs).unwrap();
        assert_eq!(l.reg_terms[0], 2.0);
        assert_eq!(l.total, 2.0);
        assert_eq!(obj.mode_loss(&fs, 0).unwrap(), 2.0);
    }

    #[test]
    fn mode_losses_sum_to_total() {
        let x = binary_tensor();
        let graphs = vec![
            IntraGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap(),
            IntraGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap(),
            IntraGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap(),
        ];
        let obj = Objective::new(&x, &graphs, 1.3).unwrap();
        let fs = FactorSet::init(x.dims(), 2, 4).unwrap();
        let total = obj.total_loss(&fs).unwrap();
        let sum: f64 = (0..3).map(|m| obj.mode_loss(&fs, m).unwrap()).sum();
        assert!((sum - 2.0 * 1.3 * total.recon - total.total).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_gradient_is_laplacian_product() {
        let x = binary_tensor();
        let graphs = vec![
            IntraGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap(),
            IntraGraph::edgeless(3),
            IntraGraph::edgeless(2),
        ];
        let obj = Objective::new(&x, &graphs, 0.0).unwrap();
        let fs = FactorSet::init(x.dims(), 2, 8).unwrap();
        let g = obj.grad_mode(&fs, 0).unwrap();
        let want = graphs[0].laplacian().to_dense().dot(fs.factor(0));
        assert_eq!(g, want);
        assert_eq!(obj.mode_loss(&fs, 0).unwrap(), obj.reg_term(0, fs.factor(0)));
    }

    #[test]
    fn exact_fit_is_stationary() {
        let fs = FactorSet::init(&[3, 4], 2, 2).unwrap();
        let mut entries = Vec::new();
        for i in 0..3 {
            for j in 0..4 {
                entries.push((vec![i, j], fs.reconstruct_unchecked(&[i, j])));
            }
        }
        for observed in [true, false] {
            let x = SparseTensor::new(vec![3, 4], entries.clone(), observed).unwrap();
            let graphs = vec![IntraGraph::edgeless(3), IntraGraph::edgeless(4)];
            let obj = Objective::new(&x, &graphs, 1.0).unwrap();
            for m in 0..2 {
                let g = obj.grad_mode(&fs, m).unwrap();
                assert!(g.iter().all(|v| v.abs() < 1e-12), "{g}");
            }
        }
    }

    #[test]
    fn validation_errors() {
        let x = binary_tensor();
        let graphs = vec![IntraGraph::edgeless(2), IntraGraph::edgeless(3)];
        assert!(Objective::new(&x, &graphs, 1.0).is_err());
        let graphs = vec![IntraGraph::edgeless(2), IntraGraph::edgeless(3), IntraGraph::edgeless(3)];
        assert!(Objective::new(&x, &graphs, 1.0).is_err());
        let graphs = vec![IntraGraph::edgeless(2), IntraGraph::edgeless(3), IntraGraph::edgeless(2)];
        let obj = Objective::new(&x, &graphs, 1.0).unwrap();
        let fs = FactorSet::zeros(&[2, 3, 3], 1).unwrap();
        assert!(obj.total_loss(&fs).is_err());
        let fs = FactorSet::zeros(&[2, 3, 2], 1).unwrap();
        assert!(obj.grad_mode(&fs, 3).is_err());
        assert!(obj.clone().with_reg_weights(&[1.0, 1.0]).is_err());
    }
}
