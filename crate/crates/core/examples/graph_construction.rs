//! Build intra-modal graphs from features and from shared memberships, and look at
//! what the normalized Laplacian does to smooth and rough signals.

use hyperlearn::{chebyshev_apply, cooccurrence_graph, knn_graph, IntraGraph};
use ndarray::{Array1, Array2};

fn quadratic(g: &IntraGraph, x: &Array1<f64>) -> f64 {
    let lx = g.laplacian().dot_dense(&x.view().insert_axis(ndarray::Axis(1))).unwrap();
    x.dot(&lx.column(0))
}

fn main() -> hyperlearn::Result<()> {
    // two clusters of points on a line
    let feats = Array2::from_shape_fn((10, 1), |(i, _)| if i < 5 { i as f64 * 0.1 } else { 5.0 + i as f64 * 0.1 });
    let g = knn_graph(feats.view(), 2)?;
    println!("kNN graph: {} nodes, {} edges", g.n(), g.edge_count());

    // the normalized Laplacian annihilates D^{1/2} times a per-component constant
    let smooth = Array1::from_shape_fn(10, |i| g.degrees()[i].sqrt() * if i < 5 { 1.0 } else { -1.0 });
    let rough = Array1::from_shape_fn(10, |i| if i % 2 == 0 { 1.0 } else { -1.0 });
    println!("xᵀLx for a cluster-constant signal {:.2e}", quadratic(&g, &smooth));
    println!("xᵀLx for an alternating signal     {:.4}", quadratic(&g, &rough));

    // co-occurrence: items sharing a group get linked
    let memberships = [(0, 0), (1, 0), (2, 0), (2, 1), (3, 1), (4, 2)];
    let c = cooccurrence_graph(&memberships, 5)?;
    for (i, j, w) in c.edges() {
        println!("co-occurrence edge {i} - {j} weight {w}");
    }

    let x = smooth.insert_axis(ndarray::Axis(1));
    let basis = chebyshev_apply(g.laplacian(), x.view(), 3)?;
    for (k, t) in basis.iter().enumerate() {
        println!("T_{k}(L̃)x norm {:.4}", t.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(())
}
