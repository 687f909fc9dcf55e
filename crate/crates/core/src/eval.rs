//! Evaluation metrics over held-out data.

use crate::error::{Error, Result};
use crate::factor::FactorSet;
use crate::sptensor::{check_compatible, SparseTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub support: usize,
    pub seed: u64,
    pub plan_hash: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,value,support,seed,plan_hash";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{},{},{:016x}",
            self.name, self.value, self.support, self.seed, self.plan_hash
        )
    }
}

/// Root mean squared error over `(predicted, actual)` pairs.
pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("rmse of an empty prediction list".into()));
    }
    let sse: f64 = pairs.iter().map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / pairs.len() as f64).sqrt())
}

/// `(prediction, value)` for every stored entry of `test`.
pub fn predictions(test: &SparseTensor, fs: &FactorSet) -> Result<Vec<(f64, f64)>> {
    check_compatible(test, fs)?;
    Ok(test.iter().map(|(idx, v)| (fs.reconstruct_unchecked(idx), v)).collect())
}

/// Mean over relevant items of precision at that item's rank.
///
/// Items are ranked by descending score; equal scores keep ascending item order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Invalid("average precision needs at least one positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / positives as f64)
}

/// Fraction of test hyperedges whose `target_mode` index is the reconstruction argmax
/// over all candidates (ties go to the lowest index).
pub fn attribution_accuracy(test: &SparseTensor, fs: &FactorSet, target_mode: usize) -> Result<f64> {
    check_compatible(test, fs)?;
    if target_mode >= test.order() {
        return Err(Error::Index(format!("target mode {target_mode} >= order {}", test.order())));
    }
    if test.is_empty() {
        return Err(Error::Invalid("attribution accuracy needs at least one test hyperedge".into()));
    }
    let candidates = test.dims()[target_mode];
    let mut probe = vec![0usize; test.order()];
    let mut correct = 0usize;
    for (idx, _) in test.iter() {
        probe.copy_from_slice(idx);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for c in 0..candidates {
            probe[target_mode] = c;
            let s = fs.reconstruct_unchecked(&probe);
            if s > best.0 {
                best = (s, c);
            }
        }
        if best.1 == idx[target_mode] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.nnz() as f64)
}
