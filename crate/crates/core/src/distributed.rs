//! Alternating per-mode optimization with one worker per mode.
//!
//! Each mode's factor matrix is owned by a single worker. In a Gauss-Seidel
//! round the workers run one after another and each sees the latest factors of
//! the others; in a Jacobi round all workers start from the same round-start
//! snapshot, run concurrently on their own threads, and their results are
//! swapped in together at the round barrier. Only factor matrices are ever
//! exchanged between workers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;

use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};
use crate::factor::FactorSet;
use crate::graph::IntraGraph;
use crate::mgcnn::{train_refiner, MGCNNModel, RefineReport};
use crate::objective::{LossBreakdown, Objective};
use crate::sptensor::SparseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sweep {
    GaussSeidel,
    Jacobi,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss_seidel" => Ok(Sweep::GaussSeidel),
            "jacobi" => Ok(Sweep::Jacobi),
            _ => Err(Error::Invalid(format!("unknown sweep `{s}` (gauss_seidel|jacobi)"))),
        }
    }
}

impl std::fmt::Display for Sweep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sweep::GaussSeidel => "gauss_seidel",
            Sweep::Jacobi => "jacobi",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub rank: usize,
    pub lambda: f64,
    pub sweep: Sweep,
    /// Gradient steps per mode per round.
    pub inner_steps: usize,
    /// Fixed step, or the first trial step when backtracking.
    pub step: f64,
    pub backtracking: bool,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub max_halvings: usize,
    /// Jacobi only: damp the combined update at the barrier until the loss does not rise.
    pub barrier_search: bool,
    pub max_rounds: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Per-mode regularizer weights; empty means all 1.
    pub reg_weights: Vec<f64>,
    /// Modes whose factors are held fixed.
    pub frozen: Vec<usize>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            rank: 10,
            lambda: 1.0,
            sweep: Sweep::GaussSeidel,
            inner_steps: 5,
            step: 1.0,
            backtracking: true,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            max_halvings: 30,
            barrier_search: false,
            max_rounds: 100,
            rel_tol: 1e-6,
            seed: 0,
            reg_weights: Vec::new(),
            frozen: Vec::new(),
        }
    }
}

const PLAN_KEYS: &[&str] = &[
    "rank",
    "lambda",
    "sweep",
    "inner_steps",
    "step",
    "backtracking",
    "shrink",
    "sufficient_decrease",
    "max_halvings",
    "barrier_search",
    "max_rounds",
    "rel_tol",
    "seed",
    "reg_weights",
    "frozen",
];

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and non-negative");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1");
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return bad("step must be positive");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink must lie in (0, 1)");
        }
        if self.rel_tol.is_nan() || self.rel_tol <= 0.0 {
            return bad("rel_tol must be positive");
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KeyValues::read(path)?)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(PLAN_KEYS)?;
        let d = TrainPlan::default();
        let plan = TrainPlan {
            rank: kv.require("rank")?,
            lambda: kv.get("lambda")?.unwrap_or(d.lambda),
            sweep: match kv.raw("sweep") {
                Some(s) => s.parse().map_err(|e: Error| Error::parse(kv.path(), 0, e.to_string()))?,
                None => d.sweep,
            },
            inner_steps: kv.get("inner_steps")?.unwrap_or(d.inner_steps),
            step: kv.get("step")?.unwrap_or(d.step),
            backtracking: kv.get("backtracking")?.unwrap_or(d.backtracking),
            shrink: kv.get("shrink")?.unwrap_or(d.shrink),
            sufficient_decrease: kv.get("sufficient_decrease")?.unwrap_or(d.sufficient_decrease),
            max_halvings: kv.get("max_halvings")?.unwrap_or(d.max_halvings),
            barrier_search: kv.get("barrier_search")?.unwrap_or(d.barrier_search),
            max_rounds: kv.get("max_rounds")?.unwrap_or(d.max_rounds),
            rel_tol: kv.get("rel_tol")?.unwrap_or(d.rel_tol),
            seed: kv.get("seed")?.unwrap_or(d.seed),
            reg_weights: kv.get_list("reg_weights")?.unwrap_or_default(),
            frozen: kv.get_list("frozen")?.unwrap_or_default(),
        };
        plan.validate().map_err(|e| Error::parse(kv.path(), 0, e.to_string()))?;
        Ok(plan)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rank={}", self.rank);
        let _ = writeln!(s, "lambda={:?}", self.lambda);
        let _ = writeln!(s, "sweep={}", self.sweep);
        let _ = writeln!(s, "inner_steps={}", self.inner_steps);
        let _ = writeln!(s, "step={:?}", self.step);
        let _ = writeln!(s, "backtracking={}", self.backtracking);
        let _ = writeln!(s, "shrink={:?}", self.shrink);
        let _ = writeln!(s, "sufficient_decrease={:?}", self.sufficient_decrease);
        let _ = writeln!(s, "max_halvings={}", self.max_halvings);
        let _ = writeln!(s, "barrier_search={}", self.barrier_search);
        let _ = writeln!(s, "max_rounds={}", self.max_rounds);
        let _ = writeln!(s, "rel_tol={:?}", self.rel_tol);
        let _ = writeln!(s, "seed={}", self.seed);
        if !self.reg_weights.is_empty() {
            let _ = writeln!(s, "reg_weights={}", join_list(&self.reg_weights));
        }
        if !self.frozen.is_empty() {
            let _ = writeln!(s, "frozen={}", join_list(&self.frozen));
        }
        s
    }

    /// FNV-1a of the plan text, used to fingerprint reports.
    pub fn fingerprint(&self) -> u64 {
        self.to_kv_string()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// Loss after the round.
    pub loss: LossBreakdown,
    /// Norm of each mode's gradient at its first inner step (0 for frozen modes).
    pub grad_norms: Vec<f64>,
    pub mode_ms: Vec<f64>,
    pub round_ms: f64,
    /// Modes whose line search ran out of halvings this round.
    pub stalled: Vec<usize>,
}

struct ModeResult {
    factor: Option<Array2<f64>>,
    grad_norm: f64,
    step: f64,
    stalled: bool,
    ms: f64,
}

/// Stateful driver holding the objective and each mode's adaptive step size.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    objective: Objective<'a>,
    plan: TrainPlan,
    steps: Vec<f64>,
    rounds_done: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(x: &'a SparseTensor, graphs: &'a [IntraGraph], plan: &TrainPlan) -> Result<Self> {
        plan.validate()?;
        let mut objective = Objective::new(x, graphs, plan.lambda)?;
        if !plan.reg_weights.is_empty() {
            objective = objective.with_reg_weights(&plan.reg_weights)?;
        }
        if let Some(&m) = plan.frozen.iter().find(|&&m| m >= x.order()) {
            return Err(Error::Index(format!("frozen mode {m} >= order {}", x.order())));
        }
        Ok(Trainer {
            objective,
            plan: plan.clone(),
            steps: vec![plan.step; x.order()],
            rounds_done: 0,
        })
    }

    pub fn objective(&self) -> &Objective<'a> {
        &self.objective
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    fn check(&self, fs: &FactorSet) -> Result<()> {
        if fs.rank() != self.plan.rank {
            return Err(Error::Shape(format!("factors have rank {}, plan says {}", fs.rank(), self.plan.rank)));
        }
        self.objective.total_loss(fs).map(|_| ())
    }

    /// Runs `inner_steps` line-searched gradient steps on one mode of a private copy of `fs`.
    fn update_mode(&self, fs: &FactorSet, mode: usize, trial: f64) -> Result<ModeResult> {
        let start = Instant::now();
        if self.plan.frozen.contains(&mode) {
            return Ok(ModeResult {
                factor: None,
                grad_norm: 0.0,
                step: trial,
                stalled: false,
                ms: 0.0,
            });
        }
        let obj = &self.objective;
        let plan = &self.plan;
        let mut local = fs.clone();
        let mut step = trial;
        let mut first_norm = None;
        let mut stalled = false;
        for _ in 0..plan.inner_steps {
            let g = obj.grad_mode(&local, mode)?;
            let g_sq: f64 = g.iter().map(|v| v * v).sum();
            if !g_sq.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient on mode {mode}")));
            }
            first_norm.get_or_insert(g_sq.sqrt());
            if g_sq == 0.0 {
                break;
            }
            let a = local.factor(mode).clone();
            if !plan.backtracking {
                local.set_factor(mode, &a - &(&g * plan.step))?;
                continue;
            }
            let f0 = obj.mode_loss(&local, mode)?;
            let mut t = step;
            let mut accepted = false;
            for _ in 0..=plan.max_halvings {
                local.set_factor(mode, &a - &(&g * t))?;
                let f1 = obj.mode_loss(&local, mode)?;
                if f1 <= f0 - plan.sufficient_decrease * t * g_sq {
                    accepted = true;
                    break;
                }
                t *= plan.shrink;
            }
            if !accepted {
                local.set_factor(mode, a)?;
                stalled = true;
                log::debug!("mode {mode}: line search exhausted, factor left unchanged");
                break;
            }
            // try a longer step next time
            step = t * 2.0;
        }
        Ok(ModeResult {
            factor: Some(local.into_factors().swap_remove(mode)),
            grad_norm: first_norm.unwrap_or(0.0),
            step,
            stalled,
            ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Shrinks the combined Jacobi update until the total loss does not rise.
    ///
    /// Each proposal is a descent step for its own mode at the snapshot, so their sum is a
    /// descent direction and a small enough scale always helps. Returns the accepted factors
    /// (`None` when every halving failed) and the last scale tried.
    fn barrier_search(&self, fs: &FactorSet, proposed: &[Option<Array2<f64>>]) -> Result<(Option<FactorSet>, f64)> {
        let f0 = self.objective.total_loss(fs)?.total;
        let mut scale = 1.0;
        for _ in 0..=self.plan.max_halvings {
            let cand = blend(fs, proposed, scale)?;
            if self.objective.total_loss(&cand)?.total <= f0 {
                return Ok((Some(cand), scale));
            }
            scale *= self.plan.shrink;
        }
        log::debug!("barrier search exhausted, round discarded");
        Ok((None, scale))
    }

    /// One sweep over all modes; `fs` is updated in place.
    pub fn run_round(&mut self, fs: &mut FactorSet) -> Result<RoundLog> {
        self.check(fs)?;
        let k = fs.order();
        let start = Instant::now();
        let results: Vec<ModeResult> = match self.plan.sweep {
            Sweep::GaussSeidel => {
                let mut out = Vec::with_capacity(k);
                for m in 0..k {
                    let mut r = self.update_mode(fs, m, self.steps[m])?;
                    if let Some(a) = r.factor.take() {
                        fs.set_factor(m, a)?;
                    }
                    out.push(r);
                }
                out
            }
            Sweep::Jacobi => {
                let snapshot: &FactorSet = fs;
                let this = &*self;
                let results = std::thread::scope(|scope| {
                    let handles: Vec<_> = (0..k)
                        .map(|m| scope.spawn(move || this.update_mode(snapshot, m, this.steps[m])))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("mode worker panicked"))
                        .collect::<Vec<_>>()
                });
                let mut out = Vec::with_capacity(k);
                for r in results {
                    out.push(r?);
                }
                // round barrier: swap all new factors in at once
                let proposed: Vec<Option<Array2<f64>>> = out.iter_mut().map(|r| r.factor.take()).collect();
                let (next, scale) = if self.plan.barrier_search {
                    self.barrier_search(fs, &proposed)?
                } else {
                    (Some(blend(fs, &proposed, 1.0)?), 1.0)
                };
                match next {
                    Some(next) => *fs = next,
                    None => out.iter_mut().for_each(|r| r.stalled = true),
                }
                // the coupling that forced damping will be there next round too
                out.iter_mut().for_each(|r| r.step *= scale);
                out
            }
        };
        let round_ms = start.elapsed().as_secs_f64() * 1e3;
        for (m, r) in results.iter().enumerate() {
            self.steps[m] = r.step;
        }
        let loss = self.objective.total_loss(fs)?;
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss after round {}", self.rounds_done)));
        }
        let log = RoundLog {
            round: self.rounds_done,
            loss,
            grad_norms: results.iter().map(|r| r.grad_norm).collect(),
            mode_ms: results.iter().map(|r| r.ms).collect(),
            round_ms,
            stalled: results.iter().enumerate().filter(|(_, r)| r.stalled).map(|(m, _)| m).collect(),
        };
        self.rounds_done += 1;
        Ok(log)
    }

    /// Rounds until the relative loss change drops below `rel_tol` or `max_rounds` is hit.
    pub fn run(&mut self, fs: &mut FactorSet) -> Result<Vec<RoundLog>> {
        let mut prev = self.objective.total_loss(fs)?.total;
        let mut logs = Vec::new();
        for _ in 0..self.plan.max_rounds {
            let log = self.run_round(fs)?;
            let cur = log.loss.total;
            logs.push(log);
            let denom = cur.abs().max(f64::MIN_POSITIVE);
            if (prev - cur).abs() / denom < self.plan.rel_tol || cur == 0.0 {
                break;
            }
            prev = cur;
        }
        Ok(logs)
    }
}

/// `old + scale · (new − old)` for every mode with a proposal.
fn blend(fs: &FactorSet, proposed: &[Option<Array2<f64>>], scale: f64) -> Result<FactorSet> {
    let mut out = fs.clone();
    for (m, p) in proposed.iter().enumerate() {
        if let Some(a) = p {
            let next = if scale == 1.0 {
                a.clone()
            } else {
                let old = fs.factor(m);
                old + &((a - old) * scale)
            };
            out.set_factor(m, next)?;
        }
    }
    Ok(out)
}

/// One round from a fresh trainer state.
pub fn run_round(
    x: &SparseTensor,
    fs: &FactorSet,
    graphs: &[IntraGraph],
    plan: &TrainPlan,
) -> Result<(FactorSet, RoundLog)> {
    let mut trainer = Trainer::new(x, graphs, plan)?;
    let mut fs = fs.clone();
    let log = trainer.run_round(&mut fs)?;
    Ok((fs, log))
}

pub fn run_training(
    x: &SparseTensor,
    fs: &FactorSet,
    graphs: &[IntraGraph],
    plan: &TrainPlan,
) -> Result<(FactorSet, Vec<RoundLog>)> {
    let mut trainer = Trainer::new(x, graphs, plan)?;
    let mut fs = fs.clone();
    let logs = trainer.run(&mut fs)?;
    Ok((fs, logs))
}

/// Experimental schedule: each cycle runs one solver round, then `epochs` refiner epochs
/// on the updated factors. `fs` keeps the undiffused factors.
pub fn train_interleaved(
    trainer: &mut Trainer<'_>,
    fs: &mut FactorSet,
    model: &MGCNNModel,
    cycles: usize,
    epochs: usize,
) -> Result<(MGCNNModel, Vec<RoundLog>, Vec<RefineReport>)> {
    let mut model = model.clone();
    let mut logs = Vec::with_capacity(cycles);
    let mut reports = Vec::with_capacity(cycles);
    for _ in 0..cycles {
        logs.push(trainer.run_round(fs)?);
        let (next, report) = train_refiner(trainer.objective(), fs, &model, epochs)?;
        model = next;
        reports.push(report);
    }
    Ok((model, logs, reports))
}

pub fn log_csv_header(k: usize) -> String {
    let mut cols = vec!["round".to_string(), "total_loss".into(), "recon".into()];
    cols.extend((0..k).map(|m| format!("reg_{m}")));
    cols.extend((0..k).map(|m| format!("grad_norm_{m}")));
    cols.extend((0..k).map(|m| format!("time_ms_mode_{m}")));
    cols.push("time_ms_round".into());
    cols.join(",")
}

pub fn log_csv_row(log: &RoundLog) -> String {
    let mut s = format!("{},{:?},{:?}", log.round, log.loss.total, log.loss.recon);
    for v in log.loss.reg_terms.iter().chain(&log.grad_norms) {
        let _ = write!(s, ",{v:?}");
    }
    for v in log.mode_ms.iter().chain(std::iter::once(&log.round_ms)) {
        let _ = write!(s, ",{v:.3}");
    }
    s
}

/// Convergence log CSV with a header row.
pub fn write_log_csv(logs: &[RoundLog], k: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = log_csv_header(k);
    out.push('\n');
    for l in logs {
        out.push_str(&log_csv_row(l));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
