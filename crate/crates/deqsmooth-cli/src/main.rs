//! Command-line pipeline: synthetic data, training, certification, metrics.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, missing inputs),
//! 2 runtime failure.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use deqsmooth::dataset::{self, Dataset};
use deqsmooth::deq::{load_model, save_model, DeqModel};
use deqsmooth::eval::{pm_gap, ReportRow, RunMode};
use deqsmooth::report::{
    check_aligned, compute_metrics, read_report, write_metrics_json, write_report,
    write_threshold_csv, Histogram, ReportHeader, SrsHeaderInfo, REPORT_VERSION,
};
use deqsmooth::smoothing::{certify_standard, sample_predictions, SmoothingConfig};
use deqsmooth::solvers::{SolverConfig, SolverMethod};
use deqsmooth::srs::{srs_certify, srs_certify_with_predictions, DeqBackend, SrsConfig};
use deqsmooth::stats::ConfidenceSpec;
use deqsmooth::training::{clean_accuracy, train, TrainConfig};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "deqsmooth",
    version,
    about = "Certified l2 robustness for deep equilibrium models via randomized smoothing"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic point-cloud dataset.
    GenData(GenDataArgs),
    /// Train an equilibrium model with implicit-function-theorem gradients.
    Train(TrainArgs),
    /// Certify every dataset point, standard or serialized smoothing.
    Certify(CertifyArgs),
    /// Aggregate one report, or compare two sample-aligned reports.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum DataKind {
    Blobs,
    #[value(alias = "two_moons")]
    TwoMoons,
    Rings,
}

#[derive(Args)]
struct GenDataArgs {
    /// blobs, two-moons, or rings.
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long)]
    n_points: usize,
    /// Gaussian scatter around each class shape.
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
    /// Input dimension (blobs only; the curves are 2-D).
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Class count (blobs and rings; two-moons is binary).
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Distance of each blob center from the origin.
    #[arg(long, default_value_t = 0.75)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolverArgs {
    /// naive, anderson, or broyden.
    #[arg(long, default_value_t = SolverMethod::Anderson)]
    solver: SolverMethod,
    /// Relative residual target (default 1e-6 for train, 1e-3 for certify).
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap per solve (default 100 for train, 30 for certify).
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, default_value_t = 5)]
    anderson_memory: usize,
    #[arg(long, default_value_t = 1.0)]
    anderson_damping: f64,
    #[arg(long, default_value_t = 1e-4)]
    anderson_ridge: f64,
}

impl SolverArgs {
    fn to_config(&self, default_tol: f64, default_max_iters: usize) -> SolverConfig {
        SolverConfig {
            method: self.solver,
            tol: self.tol.unwrap_or(default_tol),
            max_iters: self.max_iters.unwrap_or(default_max_iters),
            anderson_memory: self.anderson_memory,
            anderson_damping: self.anderson_damping,
            anderson_ridge: self.anderson_ridge,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model JSON output path.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV (default: model path with a .loss.csv suffix).
    #[arg(long)]
    loss_out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    hidden_dim: usize,
    /// Contraction factor the recurrent weights are rescaled to.
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Gaussian augmentation noise; stored in the model for later warnings.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.2)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    adjoint_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    adjoint_tol: f64,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// standard (every sample solved cold) or srs (warm-started batches).
    #[arg(long, default_value = "standard")]
    mode: RunMode,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 1000)]
    n_samples: u64,
    /// Lane count per serialized batch.
    #[arg(long, default_value_t = 100)]
    batch_size: u64,
    /// Overall failure probability of the certificate.
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-batch iteration cap once warm (srs).
    #[arg(long, default_value_t = 3)]
    srs_steps: usize,
    /// Iteration cap for the first batch and scheduled re-warms (srs).
    #[arg(long, default_value_t = 30)]
    warmup_steps: usize,
    /// Re-warm from zero every this many batches; 0 disables (srs).
    #[arg(long, default_value_t = 0)]
    restart_interval: u64,
    /// Holdout samples re-predicted with the reference solver (srs).
    #[arg(long, default_value_t = 100)]
    holdout_k: u64,
    /// Warm every batch from the clean input's fixed point (srs).
    #[arg(long)]
    start_from_clean: bool,
    /// Re-predict all N samples with the reference solver and record the
    /// misalignment-bound gap per row (srs only; expensive).
    #[arg(long)]
    gap_diagnostic: bool,
    /// Worker threads; 0 picks the machine default.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Certify only the first K points.
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// One report, or baseline then serialized for paired metrics.
    #[arg(num_args = 1..=2, required = true)]
    reports: Vec<PathBuf>,
    /// Certified-accuracy thresholds (input-space l2 radii).
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.25,0.5,0.75,1.0,1.25,1.5")]
    thresholds: Vec<f64>,
    /// Directory for metrics.json and the plot-ready CSVs.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("input file not found: {}", path.display())))
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData(args) => gen_data(args).map_err(Failure::Runtime),
        Cmd::Train(args) => {
            require_file(&args.data)?;
            cmd_train(args).map_err(Failure::Runtime)
        }
        Cmd::Certify(args) => {
            require_file(&args.model)?;
            require_file(&args.data)?;
            if args.gap_diagnostic && args.mode != RunMode::Srs {
                return Err(Failure::Usage(
                    "--gap-diagnostic needs --mode srs (the gap compares serialized \
                     predictions against the reference solver)"
                        .into(),
                ));
            }
            cmd_certify(args).map_err(Failure::Runtime)
        }
        Cmd::Report(args) => {
            for path in &args.reports {
                require_file(path)?;
            }
            cmd_report(args).map_err(Failure::Runtime)
        }
    }
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let data = match args.kind {
        DataKind::Blobs => dataset::blobs(
            args.n_points,
            args.dim,
            args.classes,
            args.separation,
            args.noise,
            args.seed,
        )?,
        DataKind::TwoMoons => dataset::two_moons(args.n_points, args.noise, args.seed)?,
        DataKind::Rings => dataset::rings(args.n_points, args.classes, args.noise, args.seed)?,
    };
    dataset::save_dataset(&data, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} points (dim {}, {} classes) to {}",
        data.len(),
        data.dim(),
        data.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let data = dataset::load_dataset(&args.data)
        .with_context(|| format!("loading {}", args.data.display()))?;
    let solver = args.solver.to_config(1e-6, 100);
    let cfg = TrainConfig {
        sigma: args.sigma,
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        seed: args.seed,
        solver,
        adjoint_iters: args.adjoint_iters,
        adjoint_tol: args.adjoint_tol,
    };
    let init = DeqModel::init_random(
        args.hidden_dim,
        data.dim(),
        data.num_classes(),
        args.gamma,
        args.sigma,
        args.seed,
    )?;
    let (model, trace) = train(&init, &data, &cfg)?;
    save_model(&model, &args.out).with_context(|| format!("writing {}", args.out.display()))?;

    let loss_path = args
        .loss_out
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    let mut csv = String::from("epoch,step,loss\n");
    for rec in &trace {
        csv.push_str(&format!("{},{},{}\n", rec.epoch, rec.step, rec.loss));
    }
    std::fs::write(&loss_path, csv).with_context(|| format!("writing {}", loss_path.display()))?;

    let acc = clean_accuracy(&model, &data, &cfg.solver)?;
    let final_loss = trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs on {} points: final batch loss {:.4}, clean accuracy {:.3}",
        args.epochs,
        data.len(),
        final_loss,
        acc
    );
    println!("model -> {}", args.out.display());
    println!("loss trace -> {}", loss_path.display());
    Ok(())
}

fn certify_one(
    model: &DeqModel,
    data: &Dataset,
    args: &CertifyArgs,
    smooth: &SmoothingConfig,
    srs_cfg: &SrsConfig,
    solver: &SolverConfig,
    i: usize,
) -> ReportRow {
    let x = data.input(i);
    let label = data.label(i);
    let point = i as u64;
    let result = match args.mode {
        RunMode::Standard => certify_standard(model, x, smooth, solver, point)
            .map(|out| ReportRow::from_standard(point, label, &out)),
        RunMode::Srs => {
            let backend = DeqBackend::new(model, *solver);
            if args.gap_diagnostic {
                srs_certify_with_predictions(&backend, x, srs_cfg, point).and_then(
                    |(out, srs_preds)| {
                        let ref_preds = sample_predictions(model, x, smooth, solver, point)?;
                        let mut row = ReportRow::from_srs(point, label, &out);
                        row.gap = Some(pm_gap(&row, &ref_preds, &srs_preds)?);
                        Ok(row)
                    },
                )
            } else {
                srs_certify(&backend, x, srs_cfg, point)
                    .map(|out| ReportRow::from_srs(point, label, &out))
            }
        }
    };
    result.unwrap_or_else(|e| ReportRow::failed(point, label, args.mode, e.to_string()))
}

fn cmd_certify(args: CertifyArgs) -> anyhow::Result<()> {
    let model =
        load_model(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let full = dataset::load_dataset(&args.data)
        .with_context(|| format!("loading {}", args.data.display()))?;
    if full.dim() != model.input_dim() {
        anyhow::bail!(
            "dataset dim {} does not match model input dim {}",
            full.dim(),
            model.input_dim()
        );
    }
    if args.sigma != model.sigma_train {
        eprintln!(
            "warning: certifying at sigma {} but the model was trained at sigma {}",
            args.sigma, model.sigma_train
        );
    }
    let data = match args.max_points {
        Some(n) => full.truncated(n),
        None => full,
    };

    let solver = args.solver.to_config(1e-3, 30);
    let smooth = SmoothingConfig {
        sigma: args.sigma,
        n_samples: args.n_samples,
        batch_size: args.batch_size,
        confidence: ConfidenceSpec::new(args.alpha)?,
        seed: args.seed,
    };
    smooth.validate()?;
    let srs_cfg = SrsConfig {
        base: smooth.clone(),
        srs_steps: args.srs_steps,
        warmup_steps: args.warmup_steps,
        restart_interval: args.restart_interval,
        holdout_k: args.holdout_k,
        reference_solver: solver,
        start_from_clean: args.start_from_clean,
    };
    if args.mode == RunMode::Srs {
        srs_cfg.validate()?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .context("building worker pool")?;
    let start = std::time::Instant::now();
    let rows: Vec<ReportRow> = pool.install(|| {
        (0..data.len())
            .into_par_iter()
            .map(|i| certify_one(&model, &data, &args, &smooth, &srs_cfg, &solver, i))
            .collect()
    });
    let elapsed = start.elapsed().as_secs_f64();

    let header = ReportHeader {
        version: REPORT_VERSION,
        mode: args.mode,
        model_path: args.model.display().to_string(),
        data_path: args.data.display().to_string(),
        sigma: args.sigma,
        n_samples: args.n_samples,
        batch_size: args.batch_size,
        alpha: args.alpha,
        seed: args.seed,
        solver,
        srs: (args.mode == RunMode::Srs).then_some(SrsHeaderInfo {
            srs_steps: args.srs_steps,
            warmup_steps: args.warmup_steps,
            restart_interval: args.restart_interval,
            holdout_k: args.holdout_k,
            start_from_clean: args.start_from_clean,
        }),
        points: rows.len() as u64,
        gap_diagnostic: args.gap_diagnostic,
    };
    write_report(&args.out, &header, &rows)
        .with_context(|| format!("writing {}", args.out.display()))?;

    let abstained = rows.iter().filter(|r| r.status == deqsmooth::eval::RowStatus::Ok && r.predicted.is_none()).count();
    let failed = rows.iter().filter(|r| r.status != deqsmooth::eval::RowStatus::Ok).count();
    let certified: Vec<f64> = rows.iter().filter(|r| r.predicted.is_some()).map(|r| r.radius).collect();
    let mean_radius = if certified.is_empty() {
        0.0
    } else {
        certified.iter().sum::<f64>() / certified.len() as f64
    };
    println!(
        "certified {} points ({} mode) in {:.1}s: {} abstained, {} failed, mean radius {:.4}",
        rows.len(),
        args.mode,
        elapsed,
        abstained,
        failed,
        mean_radius
    );
    println!("report -> {}", args.out.display());
    Ok(())
}

fn append_histogram(csv: &mut String, name: &str, h: &Histogram) {
    let width = (h.hi - h.lo) / h.bins.len() as f64;
    for (i, count) in h.bins.iter().enumerate() {
        let lo = h.lo + width * i as f64;
        let hi = h.lo + width * (i + 1) as f64;
        csv.push_str(&format!("{name},{lo},{hi},{count}\n"));
    }
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let first = read_report(&args.reports[0])
        .with_context(|| format!("reading {}", args.reports[0].display()))?;
    let second = match args.reports.get(1) {
        Some(path) => {
            let report =
                read_report(path).with_context(|| format!("reading {}", path.display()))?;
            check_aligned(&first, &report)?;
            Some(report)
        }
        None => None,
    };

    let metrics = compute_metrics(
        &first.1,
        second.as_ref().map(|(_, rows)| rows.as_slice()),
        &args.thresholds,
    )?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let metrics_path = args.out_dir.join("metrics.json");
    write_metrics_json(&metrics_path, &metrics)?;
    let acc_path = args.out_dir.join("certified_accuracy.csv");
    write_threshold_csv(&acc_path, &metrics)?;

    println!("{} rows: acr {:.4} ({} abstained, {} failed)", metrics.rows, metrics.acr, metrics.abstained, metrics.failed);
    match &metrics.paired {
        None => {
            for (t, a) in metrics.thresholds.iter().zip(metrics.certified_accuracy.iter()) {
                println!("  certified accuracy at r > {t}: {a:.3}");
            }
        }
        Some(p) => {
            println!("paired acr {:.4}; {} positive-baseline pairs, rrd mean {:.4}, {:.1}% within 0.1",
                p.acr_second, p.rrd_count, p.rrd_mean, 100.0 * p.rrd_within_tenth);
            for ((t, a), b) in metrics
                .thresholds
                .iter()
                .zip(metrics.certified_accuracy.iter())
                .zip(p.certified_accuracy_second.iter())
            {
                println!("  certified accuracy at r > {t}: {a:.3} vs {b:.3}");
            }
            let mut csv = String::from("histogram,bin_lo,bin_hi,count\n");
            append_histogram(&mut csv, "rrd", &p.rrd_histogram);
            if let Some(h) = &p.pm_histogram {
                append_histogram(&mut csv, "pm_upper", h);
            }
            if let Some(h) = &p.gap_histogram {
                append_histogram(&mut csv, "gap", h);
            }
            let hist_path = args.out_dir.join("histograms.csv");
            std::fs::write(&hist_path, csv)
                .with_context(|| format!("writing {}", hist_path.display()))?;
            println!("histograms -> {}", hist_path.display());
        }
    }
    println!("metrics -> {}", metrics_path.display());
    println!("certified accuracy table -> {}", acc_path.display());
    Ok(())
}
