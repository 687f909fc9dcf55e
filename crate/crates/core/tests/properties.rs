//! Randomized invariants.

mod common;

use std::collections::HashSet;

use hyperlearn::gradcheck::{random_instance, random_refiner};
use hyperlearn::{
    attribution_accuracy, average_precision, bilinear_conv, chebyshev_apply, diffuse, knn_graph, masked_sq_error,
    mode_conv, rmse, unfold_column_index, ChebFilter, FactorSet, IntraGraph, Objective, SparseTensor,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_graph(rng: &mut impl Rng, n: usize, p: f64) -> IntraGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j, rng.random_range(0.2..3.0)));
            }
        }
    }
    IntraGraph::from_edges(n, &edges).unwrap()
}

/// Graph with node `i` renamed to `perm[i]`.
fn relabel(g: &IntraGraph, perm: &[usize]) -> IntraGraph {
    let edges: Vec<_> = g.edges().into_iter().map(|(i, j, w)| (perm[i], perm[j], w)).collect();
    IntraGraph::from_edges(g.n(), &edges).unwrap()
}

/// Row `i` of `a` moved to row `perm[i]`.
fn permute_rows(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(a.dim());
    for (i, row) in a.rows().into_iter().enumerate() {
        out.row_mut(perm[i]).assign(&row);
    }
    out
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unfolding_is_a_bijection(dims in prop::collection::vec(1usize..5, 2..5), mode_pick in 0usize..4, row_pick in 0usize..4) {
        let mode = mode_pick % dims.len();
        let row = row_pick % dims[mode];
        let cols = cells(&dims) / dims[mode];
        let mut seen = vec![false; cols];
        for lin in 0..cells(&dims) {
            let idx = decode(lin, &dims);
            if idx[mode] != row {
                continue;
            }
            let c = unfold_column_index(&dims, mode, &idx).unwrap();
            prop_assert!(c < cols && !seen[c]);
            seen[c] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn squared_error_is_nonnegative_and_zero_on_exact_fit(seed in any::<u64>(), observed in any::<bool>()) {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, 3, 2, observed).unwrap();
        prop_assert!(masked_sq_error(&inst.tensor, &inst.factors).unwrap() >= 0.0);
        let exact: Vec<f64> = inst.tensor.iter().map(|(idx, _)| cp_value(&inst.factors, idx)).collect();
        let fit = SparseTensor::from_parts(
            inst.tensor.dims().to_vec(),
            inst.tensor.coords().to_vec(),
            exact,
            true,
        ).unwrap();
        prop_assert!(masked_sq_error(&fit, &inst.factors).unwrap() < 1e-24);
    }

    #[test]
    fn laplacian_spectrum_lies_in_zero_two(seed in any::<u64>(), n in 1usize..12, p in 0.0f64..1.0) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, p);
        let l = g.laplacian().to_dense();
        prop_assert!(g.laplacian().is_symmetric());
        for _ in 0..20 {
            let x = Array1::from_shape_simple_fn(n, || r.random_range(-1.0..1.0));
            let q = x.dot(&l.dot(&x));
            prop_assert!(q >= -1e-12);
            prop_assert!(q <= 2.0 * x.dot(&x) + 1e-12);
        }
        // D^{1/2}·1 spans the null space on every non-isolated node
        let v = Array1::from_iter(g.degrees().iter().map(|d| d.sqrt()));
        prop_assert!(l.dot(&v).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn chebyshev_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..10, p in 0usize..5) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, 0.4);
        let x = random_matrix(&mut r, n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let plain = chebyshev_apply(g.laplacian(), x.view(), p).unwrap();
        let moved = chebyshev_apply(relabel(&g, &perm).laplacian(), permute_rows(&x, &perm).view(), p).unwrap();
        for (a, b) in plain.iter().zip(&moved) {
            prop_assert!(max_abs_diff(&permute_rows(a, &perm), b) < 1e-12);
        }
    }

    #[test]
    fn knn_graph_follows_row_relabeling(seed in any::<u64>(), n in 3usize..15, k_pick in 1usize..5) {
        let mut r = rng(seed);
        let k = k_pick.min(n - 1);
        let f = random_matrix(&mut r, n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let g = knn_graph(f.view(), k).unwrap();
        let h = knn_graph(permute_rows(&f, &perm).view(), k).unwrap();
        let mapped: HashSet<(usize, usize)> = g
            .edges()
            .into_iter()
            .map(|(i, j, _)| (perm[i].min(perm[j]), perm[i].max(perm[j])))
            .collect();
        let direct: HashSet<(usize, usize)> = h.edges().into_iter().map(|(i, j, _)| (i.min(j), i.max(j))).collect();
        prop_assert_eq!(mapped, direct);
        // every node keeps at least its own k neighbours
        prop_assert!(g.degrees().iter().all(|&d| d >= k as f64));
    }

    #[test]
    fn convolutions_are_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (gr, gc) = (random_graph(&mut r, 6, 0.4), random_graph(&mut r, 5, 0.4));
        let x = random_matrix(&mut r, 6, 5);
        let y = random_matrix(&mut r, 6, 5);
        let mix = &x * a + &y * b;
        let filter = ChebFilter::new(random_matrix(&mut r, 4, 2)).unwrap();
        let lhs = mode_conv(mix.view(), gr.laplacian(), &filter).unwrap();
        let rhs = mode_conv(x.view(), gr.laplacian(), &filter).unwrap() * a
            + mode_conv(y.view(), gr.laplacian(), &filter).unwrap() * b;
        prop_assert!(lhs.iter().zip(&rhs).all(|(p, q)| (p - q).abs() < 1e-12));

        let theta = random_matrix(&mut r, 3, 3);
        let conv = |m: &Array2<f64>| bilinear_conv(m.view(), gr.laplacian(), gc.laplacian(), theta.view()).unwrap();
        prop_assert!(max_abs_diff(&conv(&mix), &(conv(&x) * a + conv(&y) * b)) < 1e-12);
    }

    #[test]
    fn diffusion_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..9) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, 0.5);
        let a = random_matrix(&mut r, n, 2);
        let model = random_refiner(&mut r, 1, 2, false).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let (plain, _) = diffuse(a.view(), g.laplacian(), &model, 0).unwrap();
        let (moved, _) = diffuse(permute_rows(&a, &perm).view(), relabel(&g, &perm).laplacian(), &model, 0).unwrap();
        prop_assert!(max_abs_diff(&permute_rows(&plain, &perm), &moved) < 1e-12);
    }

    #[test]
    fn recon_term_is_shared_across_modes(seed in any::<u64>(), order in 2usize..5, observed in any::<bool>()) {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, order, 2, observed).unwrap();
        let obj = Objective::new(&inst.tensor, &inst.graphs, inst.lambda).unwrap();
        let recon = obj.recon(&inst.factors).unwrap();
        for m in 0..order {
            let mode_recon = (obj.mode_loss(&inst.factors, m).unwrap() - obj.reg_term(m, inst.factors.factor(m))) / inst.lambda;
            prop_assert!((mode_recon - recon).abs() <= 1e-10 * recon.max(1.0));
        }
    }

    #[test]
    fn small_gradient_step_decreases_loss(seed in any::<u64>(), order in 2usize..5, observed in any::<bool>()) {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, order, 2, observed).unwrap();
        let obj = Objective::new(&inst.tensor, &inst.graphs, inst.lambda).unwrap();
        let before = obj.total_loss(&inst.factors).unwrap().total;
        for m in 0..order {
            let g = obj.grad_mode(&inst.factors, m).unwrap();
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let mut fs = inst.factors.clone();
            fs.set_factor(m, inst.factors.factor(m) - &(&g * 1e-6)).unwrap();
            prop_assert!(obj.total_loss(&fs).unwrap().total < before);
        }
    }

    #[test]
    fn ap_is_a_bounded_rank_statistic(seed in any::<u64>(), n in 1usize..30) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        labels[0] = true;
        let ap = average_precision(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        let squashed: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(average_precision(&squashed, &labels).unwrap(), ap);
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        prop_assert_eq!(average_precision(&cubed, &labels).unwrap(), ap);
    }

    #[test]
    fn rmse_is_nonnegative_and_symmetric(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)) {
        let e = rmse(&pairs).unwrap();
        prop_assert!(e >= 0.0);
        let swapped: Vec<(f64, f64)> = pairs.iter().map(|&(p, a)| (a, p)).collect();
        prop_assert_eq!(rmse(&swapped).unwrap(), e);
    }

    #[test]
    fn attribution_survives_cp_rescaling(seed in any::<u64>(), col in 0usize..3, c in 0.1f64..10.0) {
        let mut r = rng(seed);
        let dims = vec![6, 5, 4];
        let fs = FactorSet::new(dims.iter().map(|&n| random_matrix(&mut r, n, 3)).collect()).unwrap();
        let edges: Vec<_> = (0..40)
            .map(|_| vec![r.random_range(0..6), r.random_range(0..5), r.random_range(0..4)])
            .collect::<HashSet<_>>()
            .into_iter()
            .map(|idx| (idx, 1.0))
            .collect();
        let test = SparseTensor::new(dims, edges, false).unwrap();
        let mut a1 = fs.factor(1).clone();
        let mut a2 = fs.factor(2).clone();
        a1.column_mut(col).mapv_inplace(|v| v * c);
        a2.column_mut(col).mapv_inplace(|v| v / c);
        let scaled = FactorSet::new(vec![fs.factor(0).clone(), a1, a2]).unwrap();
        let acc = attribution_accuracy(&test, &fs, 0).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert_eq!(attribution_accuracy(&test, &scaled, 0).unwrap(), acc);
    }
}
