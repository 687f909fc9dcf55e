use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hyperlearn::data::{generate_synthetic, Dataset, SynthSpec};
use hyperlearn::distributed::{write_log_csv, Sweep, TrainPlan, Trainer};
use hyperlearn::eval::{attribution_accuracy, average_precision, predictions, rmse, MetricReport};
use hyperlearn::gradcheck::{objective_suite, refiner_suite, OBJECTIVE_STEP, REFINER_STEP};
use hyperlearn::mgcnn::{diffuse_all, train_refiner, MGCNNModel, RefinerConfig};
use hyperlearn::{Error, FactorSet, Result};

#[derive(Parser)]
#[command(name = "hyperlearn", version, about = "Graph-regularized hypergraph tensor factorization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a planted synthetic dataset and its ground-truth factors.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train factors on a dataset manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run the graph-convolutional refinement stage after training.
        #[arg(long)]
        refine: bool,
        #[arg(long, default_value_t = 200)]
        refine_epochs: usize,
    },
    /// Score a factor checkpoint on the manifest's held-out entries.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        factors: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        target_mode: Option<usize>,
        /// Held-out entries with value at or above this count as positives for `ap`.
        #[arg(long, default_value_t = 0.5)]
        positive_threshold: f64,
        /// Plan used for the fingerprint column; defaults to `plan.txt` beside the factors.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Per-round timing of the sweep schedules.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "gauss_seidel,jacobi")]
        sweeps: Vec<String>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of the objective and refiner gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Rmse,
    Ap,
    Attribution,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Synth { spec, out } => synth(&spec, &out)?,
        Cmd::Train {
            manifest,
            plan,
            out,
            refine,
            refine_epochs,
        } => train(&manifest, &plan, &out, refine.then_some(refine_epochs))?,
        Cmd::Eval {
            manifest,
            factors,
            metric,
            target_mode,
            positive_threshold,
            plan,
        } => eval(&manifest, &factors, metric, target_mode, positive_threshold, plan)?,
        Cmd::Bench {
            manifest,
            plan,
            sweeps,
            repeats,
            out,
        } => bench(&manifest, &plan, &sweeps, repeats, out.as_deref())?,
        Cmd::Gradcheck { seed } => return gradcheck(seed),
    }
    Ok(ExitCode::SUCCESS)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(spec_path: &Path, out: &Path) -> Result<()> {
    let spec = SynthSpec::read(spec_path)?;
    let (data, truth) = generate_synthetic(&spec)?;
    let manifest = data.write(out)?;
    truth.write_checkpoint(out.join("truth.tsv"))?;
    write_file(&out.join("spec.txt"), &spec.to_kv_string())?;
    println!("{}", manifest.display());
    Ok(())
}

fn train(manifest: &Path, plan_path: &Path, out: &Path, refine_epochs: Option<usize>) -> Result<()> {
    let data = Dataset::load_manifest(manifest)?;
    let plan = TrainPlan::read(plan_path)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut fs = FactorSet::init(data.tensor.dims(), plan.rank, plan.seed)?;
    let mut trainer = Trainer::new(&data.tensor, &data.graphs, &plan)?;
    let logs = trainer.run(&mut fs)?;
    write_log_csv(&logs, fs.order(), out.join("convergence.csv"))?;
    write_file(&out.join("plan.txt"), &plan.to_kv_string())?;
    if let Some(last) = logs.last() {
        log::info!("{} rounds, final loss {:e}", logs.len(), last.loss.total);
    }

    if let Some(epochs) = refine_epochs {
        let cfg = RefinerConfig {
            seed: plan.seed,
            ..Default::default()
        };
        let objective = trainer.objective();
        let model = MGCNNModel::init(fs.order(), plan.rank, &cfg)?;
        let (model, report) = train_refiner(objective, &fs, &model, epochs)?;
        let mut csv = String::from("epoch,loss,grad_norm\n");
        for (e, loss) in report.losses.iter().enumerate() {
            let g = report.grad_norms.get(e).map_or(String::new(), |g| format!("{g:?}"));
            let _ = writeln!(csv, "{e},{loss:?},{g}");
        }
        write_file(&out.join("refine.csv"), &csv)?;
        model.write_checkpoint(out.join("refiner.txt"))?;
        fs.write_checkpoint(out.join("factors_unrefined.tsv"))?;
        fs = diffuse_all(objective, &fs, &model)?.0;
    }
    fs.write_checkpoint(out.join("factors.tsv"))
}

fn eval(
    manifest: &Path,
    factors: &Path,
    metric: Metric,
    target_mode: Option<usize>,
    threshold: f64,
    plan: Option<PathBuf>,
) -> Result<()> {
    let data = Dataset::load_manifest(manifest)?;
    let fs = FactorSet::read_checkpoint(factors)?;
    let plan_path = plan.unwrap_or_else(|| factors.with_file_name("plan.txt"));
    let plan_hash = if plan_path.exists() {
        TrainPlan::read(&plan_path)?.fingerprint()
    } else {
        0
    };
    let test = &data.test;
    let (name, value) = match metric {
        Metric::Rmse => ("rmse", rmse(&predictions(test, &fs)?)?),
        Metric::Ap => {
            let pairs = predictions(test, &fs)?;
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1 >= threshold).collect();
            ("ap", average_precision(&scores, &labels)?)
        }
        Metric::Attribution => {
            let m = target_mode.ok_or_else(|| Error::Invalid("--metric attribution needs --target-mode".into()))?;
            ("attribution", attribution_accuracy(test, &fs, m)?)
        }
    };
    let report = MetricReport {
        name: name.into(),
        value,
        support: test.nnz(),
        seed: fs.seed(),
        plan_hash,
    };
    println!("{}", MetricReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

fn bench(manifest: &Path, plan_path: &Path, sweeps: &[String], repeats: usize, out: Option<&Path>) -> Result<()> {
    let data = Dataset::load_manifest(manifest)?;
    let base = TrainPlan::read(plan_path)?;
    let sweeps = sweeps.iter().map(|s| s.parse()).collect::<Result<Vec<Sweep>>>()?;
    let k = data.tensor.order();
    let mut csv = String::from("sweep,repeat,round,total_loss");
    for m in 0..k {
        let _ = write!(csv, ",time_ms_mode_{m}");
    }
    csv.push_str(",time_ms_round\n");
    for &sweep in &sweeps {
        let plan = TrainPlan { sweep, ..base.clone() };
        let mut times = Vec::new();
        for rep in 0..repeats {
            let mut fs = FactorSet::init(data.tensor.dims(), plan.rank, plan.seed)?;
            let mut trainer = Trainer::new(&data.tensor, &data.graphs, &plan)?;
            for _ in 0..plan.max_rounds {
                let log = trainer.run_round(&mut fs)?;
                let _ = write!(csv, "{sweep},{rep},{},{:?}", log.round, log.loss.total);
                for t in &log.mode_ms {
                    let _ = write!(csv, ",{t:.3}");
                }
                let _ = writeln!(csv, ",{:.3}", log.round_ms);
                times.push(log.round_ms);
            }
        }
        times.sort_by(f64::total_cmp);
        if let Some(median) = times.get(times.len() / 2) {
            eprintln!("{sweep}: median round {median:.3} ms over {} rounds", times.len());
        }
    }
    match out {
        Some(path) => write_file(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn gradcheck(seed: u64) -> Result<ExitCode> {
    let reports = [objective_suite(seed, 20, OBJECTIVE_STEP)?, refiner_suite(seed, 10, REFINER_STEP)?];
    let mut ok = true;
    for r in &reports {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{}: {} cases, max relative error {:.3e} (tolerance {:e}) {verdict}",
            r.name, r.cases, r.max_rel_err, r.tolerance
        );
        ok &= r.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
