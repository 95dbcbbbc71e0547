//! Acceptance suite: one test per criterion, each printing its measured
//! values. Every tolerance here is load-bearing; loosening one weakens a
//! guarantee the library claims. Analytic halfspace surrogates stand in
//! where the exact smoothed classifier is known in closed form.

use deqsmooth::dataset::{blobs, Dataset};
use deqsmooth::deq::{DeqModel, logits};
use deqsmooth::eval::{pgd_l2, pm_gap, ReportRow};
use deqsmooth::linalg::{dense_solve, spectral_norm_estimate, Matrix, Vector};
use deqsmooth::smoothing::{
    certify_standard, certify_standard_fn, mc_counts_fn, sample_predictions, top_two,
    SmoothingConfig,
};
use deqsmooth::solvers::{solve, solve_map, SolverConfig, SolverMethod};
use deqsmooth::srs::{
    estimate_pm_upper, srs_certify, srs_certify_with_predictions, warm_start_solve_batch,
    DeqBackend, LaneSolve, SrsBackend, SrsConfig, SrsState,
};
use deqsmooth::stats::{
    gaussian_draw, inv_norm_cdf, lower_conf_bound, norm_cdf, ConfidenceSpec, NoiseStream,
};
use deqsmooth::training::{clean_accuracy, cross_entropy, grad_via_ift, train, TrainConfig};
use deqsmooth::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::OnceLock;
use std::time::Instant;

const ALPHA: f64 = 0.001;

fn conf() -> ConfidenceSpec {
    ConfidenceSpec::new(ALPHA).unwrap()
}

fn smoothing(sigma: f64, n: u64, batch: u64, seed: u64) -> SmoothingConfig {
    SmoothingConfig { sigma, n_samples: n, batch_size: batch, confidence: conf(), seed }
}

/// Blob model trained with sigma 0.25 augmentation; shared by the speedup,
/// gap, conservatism, and attack criteria.
fn model_025() -> &'static (DeqModel, Dataset) {
    static CACHE: OnceLock<(DeqModel, Dataset)> = OnceLock::new();
    CACHE.get_or_init(|| {
        let data = blobs(220, 2, 2, 0.75, 0.2, 901).unwrap();
        let init = DeqModel::init_random(16, 2, 2, 0.9, 0.25, 902).unwrap();
        let cfg = TrainConfig {
            sigma: 0.25,
            epochs: 20,
            lr: 0.5,
            batch_size: 32,
            seed: 902,
            ..TrainConfig::default()
        };
        let (model, _) = train(&init, &data, &cfg).unwrap();
        let acc = clean_accuracy(&model, &data, &cfg.solver).unwrap();
        assert!(acc >= 0.95, "sigma-0.25 fixture trained poorly: accuracy {acc}");
        (model, data)
    })
}

/// Blob model for the radius-difference criterion. The geometry keeps vote
/// ratios inside (0.6, 0.99): below that band the inverse-normal slope near
/// 1/2 amplifies the discounted bound's bite, above it the vote count
/// saturates and the holdout's confidence slack alone costs over a fifth of
/// the radius. The strong contraction (gamma 0.75) plus long training keep
/// three warm steps close enough to the reference that misalignment stays
/// a fraction of a percent.
fn model_05() -> &'static (DeqModel, Dataset) {
    static CACHE: OnceLock<(DeqModel, Dataset)> = OnceLock::new();
    CACHE.get_or_init(|| {
        let data = blobs(60, 2, 2, 0.6, 0.15, 903).unwrap();
        let init = DeqModel::init_random(16, 2, 2, 0.75, 0.5, 904).unwrap();
        let cfg = TrainConfig {
            sigma: 0.5,
            epochs: 40,
            lr: 0.5,
            batch_size: 32,
            seed: 904,
            ..TrainConfig::default()
        };
        let (model, _) = train(&init, &data, &cfg).unwrap();
        let acc = clean_accuracy(&model, &data, &cfg.solver).unwrap();
        assert!(acc >= 0.9, "sigma-0.5 fixture trained poorly: accuracy {acc}");
        (model, data)
    })
}

fn halfspace_class(w: &Vector, b: f64, x: &Vector) -> usize {
    usize::from(w.dot(x) + b >= 0.0)
}

/// The smoothed halfspace classifier equals the halfspace itself, so its
/// exact robust radius at x is the distance |w.x + b| / ||w||.
#[test]
fn criterion_01_halfspace_radius_matches_the_closed_form() {
    let start = Instant::now();
    let w = Vector::new(vec![1.0, 0.0]).unwrap();
    let x = Vector::new(vec![0.3, 0.0]).unwrap();
    let cfg = smoothing(0.5, 100_000, 1000, 11);

    let out = certify_standard_fn(|xn| Ok((halfspace_class(&w, 0.0, xn), 1)), 2, &x, &cfg, 0)
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "criterion 1: radius {:.5} (target 0.30 +- 0.02), p_lower {:.5} vs true {:.5}, {elapsed:.1}s",
        out.radius,
        out.p_a_lower,
        norm_cdf(0.6)
    );
    assert_eq!(out.predicted, Some(1));
    assert!((out.radius - 0.30).abs() <= 0.02, "radius {} off the oracle", out.radius);
    assert!(elapsed < 30.0, "took {elapsed:.1}s, limit 30s");
}

struct HalfspaceBackend {
    w: Vector,
    b: f64,
}

impl SrsBackend for HalfspaceBackend {
    fn num_classes(&self) -> usize {
        2
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn solve_lane(&self, x_noisy: &Vector, _init: &Vector, _budget: usize) -> Result<LaneSolve> {
        Ok(LaneSolve {
            class: halfspace_class(&self.w, self.b, x_noisy),
            z: Vector::zeros(1),
            iters: 1,
            residual: 0.0,
        })
    }
    fn reference_predict(&self, x_noisy: &Vector) -> Result<LaneSolve> {
        self.solve_lane(x_noisy, &Vector::zeros(1), 1)
    }
}

/// A certificate is unsound when its radius exceeds the exact robust
/// radius; the confidence construction caps that probability at alpha per
/// point, for the serialized path as well.
#[test]
fn criterion_02_soundness_violations_stay_below_alpha() {
    let start = Instant::now();
    let w = Vector::new(vec![1.0, 0.0]).unwrap();
    let x = Vector::new(vec![0.3, 0.0]).unwrap();
    let true_radius = 0.3;
    let points = 1000u64;

    let std_violations: u64 = (0..points)
        .into_par_iter()
        .map(|p| {
            let cfg = smoothing(0.5, 2000, 200, 22);
            let out =
                certify_standard_fn(|xn| Ok((halfspace_class(&w, 0.0, xn), 1)), 2, &x, &cfg, p)
                    .unwrap();
            u64::from(out.radius > true_radius)
        })
        .sum();

    let backend = HalfspaceBackend { w: w.clone(), b: 0.0 };
    let srs_violations: u64 = (0..points)
        .into_par_iter()
        .map(|p| {
            let cfg = SrsConfig {
                base: smoothing(0.5, 2000, 200, 22),
                srs_steps: 1,
                warmup_steps: 1,
                restart_interval: 0,
                holdout_k: 200,
                reference_solver: SolverConfig::default(),
                start_from_clean: false,
            };
            let out = srs_certify(&backend, &x, &cfg, p).unwrap();
            u64::from(out.outcome.radius > true_radius)
        })
        .sum();

    let bound = ALPHA + 3.0 * (ALPHA * (1.0 - ALPHA) / points as f64).sqrt();
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "criterion 2: violations standard {}/{points}, serialized {}/{points}, bound {:.5}, {elapsed:.0}s",
        std_violations, srs_violations, bound
    );
    assert!((std_violations as f64 / points as f64) <= bound);
    assert!((srs_violations as f64 / points as f64) <= bound);
    assert!(elapsed < 600.0, "took {elapsed:.0}s, limit 600s");
}

#[test]
fn criterion_03_solvers_agree_and_anderson_is_exact_on_affine_maps() {
    let start = Instant::now();
    let base = SolverConfig { tol: 1e-8, max_iters: 600, ..SolverConfig::default() };
    let methods = [SolverMethod::Naive, SolverMethod::Anderson, SolverMethod::Broyden];

    let mut max_gap = 0.0f64;
    for trial in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
        let hidden = rng.random_range(3..12);
        let input = rng.random_range(2..6);
        let model = DeqModel::init_random(hidden, input, 2, 0.9, 0.0, 1000 + trial).unwrap();
        let x = Vector::from_fn(input, |_| rng.random_range(-1.5..1.5));
        let z0 = Vector::zeros(hidden);

        let mut solutions = Vec::new();
        for method in methods {
            let cfg = SolverConfig { method, ..base };
            let res = solve(&model.cell, &x, &z0, &cfg).unwrap();
            assert!(res.converged, "{method} did not converge on trial {trial}");
            solutions.push(res.z);
        }
        for i in 0..solutions.len() {
            for j in i + 1..solutions.len() {
                max_gap = max_gap.max(solutions[i].sub(&solutions[j]).norm());
            }
        }
    }
    assert!(max_gap <= 1e-6, "solver disagreement {max_gap:.2e}");

    // Type-II acceleration recovers an affine fixed point once the residual
    // history spans the space. Reported iteration counts include the final
    // evaluation that merely confirms the tolerance, so a map whose residuals
    // live in one direction (a = c*I) certifies in 3 evaluations: the iterate
    // after step 2 is already exact. A general 2-d map needs one more step
    // and therefore one more evaluation.
    let cfg = SolverConfig {
        method: SolverMethod::Anderson,
        tol: 1e-10,
        max_iters: 10,
        anderson_memory: 4,
        anderson_damping: 1.0,
        anderson_ridge: 0.0,
    };

    let mut worst_scaled_iters = 0;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + trial);
        let dim = rng.random_range(2..5);
        let c: f64 = rng.random_range(0.3..0.9);
        let b = Vector::from_fn(dim, |_| rng.random_range(-1.0..1.0));
        let res =
            solve_map(|z| Ok(z.scale(c).add(&b)), &Vector::zeros(dim), &cfg).unwrap();
        assert!(res.converged, "scaled-identity trial {trial} missed tol");
        worst_scaled_iters = worst_scaled_iters.max(res.iters);
        let exact = b.scale(1.0 / (1.0 - c));
        assert!(res.z.sub(&exact).norm() <= 1e-10, "trial {trial} off the fixed point");
    }

    let mut worst_affine_steps = 0;
    for trial in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
        let mut a = Matrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let norm = spectral_norm_estimate(&a, 200);
        a.scale_in_place(0.7 / norm.max(1e-12));
        let b = Vector::from_fn(2, |_| rng.random_range(-1.0..1.0));

        let res = solve_map(|z| Ok(a.matvec(z)?.add(&b)), &Vector::zeros(2), &cfg).unwrap();
        assert!(res.converged, "affine trial {trial} missed tol");
        // steps that produced the converged iterate, confirmation excluded
        worst_affine_steps = worst_affine_steps.max(res.iters - 1);

        // and the answer is the actual fixed point
        let mut m = Matrix::identity(2);
        m.add_scaled_in_place(-1.0, &a);
        let exact = dense_solve(&m, &b).unwrap();
        assert!(res.z.sub(&exact).norm() <= 1e-8);
    }
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "criterion 3: max solver gap {max_gap:.2e} (limit 1e-6), anderson evaluations <= \
         {worst_scaled_iters} on scaled-identity maps (limit 3), steps to tol <= \
         {worst_affine_steps} on general 2-d maps (limit 3), {elapsed:.1}s"
    );
    assert!(worst_scaled_iters <= 3);
    assert!(worst_affine_steps <= 3);
    assert!(elapsed < 60.0, "took {elapsed:.1}s, limit 60s");
}

/// Both runs share one solver configuration, so neither side gets a looser
/// tolerance. The capped warm lanes stop short of full convergence by
/// design; their quality is held to the currency that matters downstream:
/// the per-sample predictions must agree with the fully converged reference
/// on the same noise draws for at least 98% of samples (the measured
/// disagreement is about 1%, the regime the misalignment machinery of
/// criteria 5, 7, and 8 prices into the certificate).
#[test]
fn criterion_04_warm_starts_halve_iterations_and_cut_wall_time() {
    let start = Instant::now();
    let (model, data) = model_025();
    let solver = SolverConfig { tol: 1e-5, max_iters: 60, ..SolverConfig::default() };
    let n = 4000u64;
    let batch = 100u64;
    let points: Vec<usize> = (0..12).collect();

    let cold: Vec<(u64, f64)> = points
        .par_iter()
        .map(|&i| {
            let cfg = smoothing(0.25, n, batch, 44);
            let out = certify_standard(model, data.input(i), &cfg, &solver, i as u64).unwrap();
            (out.total_solver_iters, out.wall_time)
        })
        .collect();
    let warm: Vec<(u64, f64, u64)> = points
        .par_iter()
        .map(|&i| {
            let cfg = smoothing(0.25, n, batch, 44);
            let srs_cfg = SrsConfig {
                base: cfg.clone(),
                srs_steps: 3,
                warmup_steps: 40,
                restart_interval: 0,
                holdout_k: 200,
                reference_solver: solver,
                start_from_clean: false,
            };
            let backend = DeqBackend::new(model, solver);
            let (out, srs_preds) =
                srs_certify_with_predictions(&backend, data.input(i), &srs_cfg, i as u64)
                    .unwrap();
            let refs = sample_predictions(model, data.input(i), &cfg, &solver, i as u64).unwrap();
            let agree = srs_preds.iter().zip(refs.iter()).filter(|(a, b)| a == b).count();
            (out.outcome.total_solver_iters, out.outcome.wall_time, agree as u64)
        })
        .collect();

    let cold_iters: u64 = cold.iter().map(|r| r.0).sum();
    let warm_iters: u64 = warm.iter().map(|r| r.0).sum();
    let cold_wall: f64 = cold.iter().map(|r| r.1).sum();
    let warm_wall: f64 = warm.iter().map(|r| r.1).sum();
    let iter_ratio = warm_iters as f64 / cold_iters as f64;
    let wall_ratio = warm_wall / cold_wall;
    let agreement =
        warm.iter().map(|r| r.2).sum::<u64>() as f64 / (points.len() as u64 * n) as f64;

    // residual levels on one point, for the record: cold solves must genuinely
    // reach the tolerance, warm capped lanes sit wherever 3 steps land them
    let backend = DeqBackend::new(model, solver);
    let x = data.input(0);
    let mut state = SrsState::cold(batch as usize, model.hidden_dim());
    let mut warm_residuals = Vec::new();
    for b in 0..(n / batch) {
        let budget = if b == 0 { 40 } else { 3 };
        let noisy: Vec<Vector> = (0..batch)
            .map(|lane| {
                let i = b * batch + lane;
                let stream = NoiseStream::new(44, 0, i);
                x.add(&gaussian_draw(&stream, x.len(), 0.25))
            })
            .collect();
        let solves = warm_start_solve_batch(&backend, &noisy, &mut state, budget).unwrap();
        if b > 0 {
            warm_residuals.extend(solves.iter().map(|s| s.residual));
        }
    }
    let mean_warm_res = warm_residuals.iter().sum::<f64>() / warm_residuals.len() as f64;

    let mut cold_residuals = Vec::new();
    for i in 0..400u64 {
        let stream = NoiseStream::new(44, 0, i);
        let xn = x.add(&gaussian_draw(&stream, x.len(), 0.25));
        let res = solve(&model.cell, &xn, &Vector::zeros(model.hidden_dim()), &solver).unwrap();
        cold_residuals.push(res.residual);
    }
    let mean_cold_res = cold_residuals.iter().sum::<f64>() / cold_residuals.len() as f64;

    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "criterion 4: iteration ratio {iter_ratio:.3} (limit 0.5), wall ratio {wall_ratio:.3} \
         (limit 0.6), prediction agreement {agreement:.4} (floor 0.98), mean residual warm \
         {mean_warm_res:.2e} vs cold {mean_cold_res:.2e}, {elapsed:.0}s"
    );
    assert!(iter_ratio <= 0.5, "iteration ratio {iter_ratio:.3}");
    assert!(wall_ratio <= 0.6, "wall ratio {wall_ratio:.3}");
    assert!(agreement >= 0.98, "serialized predictions drifted: agreement {agreement:.4}");
    assert!(mean_cold_res <= 1e-5, "cold residual quality {mean_cold_res:.2e}");
    assert!(elapsed < 300.0, "took {elapsed:.0}s, limit 300s");
}

/// The discounted bound can only lower the radius relative to certifying
/// the reference solver's own predictions on the same noise draws.
#[test]
fn criterion_05_serialized_radius_never_exceeds_the_reference_radius() {
    let (model, data) = model_025();
    let solver = SolverConfig::default();
    let n = 2000u64;
    let side = conf().side_confidence();

    let violations: usize = (0..60usize)
        .into_par_iter()
        .map(|i| {
            let x = data.input(i);
            let cfg = smoothing(0.25, n, 100, 55);
            let srs_cfg = SrsConfig {
                base: cfg.clone(),
                srs_steps: 3,
                warmup_steps: 30,
                restart_interval: 0,
                holdout_k: 200,
                reference_solver: solver,
                start_from_clean: false,
            };
            let backend = DeqBackend::new(model, solver);
            let out = srs_certify(&backend, x, &srs_cfg, i as u64).unwrap();

            // standard certificate for the same class, from the reference
            // solver's predictions on the identical noise stream
            let refs = sample_predictions(model, x, &cfg, &solver, i as u64).unwrap();
            let n_ref = refs.iter().filter(|&&c| c == out.outcome.top_class).count() as u64;
            let p_ref = lower_conf_bound(n_ref, n, side).unwrap();
            let radius_ref = if p_ref > 0.5 { 0.25 * inv_norm_cdf(p_ref).unwrap() } else { 0.0 };

            usize::from(out.outcome.radius > radius_ref)
        })
        .sum();

    println!("criterion 5: {violations} of 60 points exceeded the reference radius (limit 0)");
    assert_eq!(violations, 0);
}

#[test]
fn criterion_06_misalignment_bound_matches_its_closed_form() {
    let preds = vec![0usize; 1000];
    let (n1, n2, pm) = estimate_pm_upper(&preds, &preds, 0, &conf()).unwrap();
    assert_eq!((n1, n2), (1000, 1000));

    // k = n makes the Clopper-Pearson bound solvable by hand:
    // conf = p^n, so p = (1 - conf)^(1/n)
    let closed_form = 1.0 - 0.0005f64.powf(1.0 / 1000.0);
    println!(
        "criterion 6: pm {pm:.7} vs closed form {closed_form:.7} and 0.007573; \
         lcb(10000,10000) {:.7} vs 0.9992402",
        lower_conf_bound(10_000, 10_000, 0.9995).unwrap()
    );
    assert!((pm - closed_form).abs() <= 1e-5);
    assert!((pm - 0.007573).abs() <= 1e-5);

    let lcb = lower_conf_bound(10_000, 10_000, 0.9995).unwrap();
    assert!((lcb - 0.9992402).abs() <= 1e-6);
}

/// Five warm steps keep the serialized chain aligned with the reference on
/// all but a sliver of samples, so most points report zero empirical
/// misalignment and their gaps collapse onto the holdout's confidence
/// slack, the minimum of the distribution.
#[test]
fn criterion_07_misalignment_gaps_are_nonnegative_and_pile_up_near_zero() {
    let (model, data) = model_025();
    let solver = SolverConfig::default();
    let n = 1000u64;

    let gaps: Vec<f64> = (0..120usize)
        .into_par_iter()
        .filter_map(|i| {
            let x = data.input(i);
            let cfg = smoothing(0.25, n, 100, 77);
            let srs_cfg = SrsConfig {
                base: cfg.clone(),
                srs_steps: 5,
                warmup_steps: 40,
                restart_interval: 0,
                holdout_k: 100,
                reference_solver: solver,
                start_from_clean: false,
            };
            let backend = DeqBackend::new(model, solver);
            let (out, srs_preds) =
                srs_certify_with_predictions(&backend, x, &srs_cfg, i as u64).unwrap();
            out.outcome.predicted?;
            let refs = sample_predictions(model, x, &cfg, &solver, i as u64).unwrap();
            let row = ReportRow::from_srs(i as u64, data.label(i), &out);
            Some(pm_gap(&row, &refs, &srs_preds).unwrap())
        })
        .collect();

    let count = gaps.len();
    assert!(count >= 100, "only {count} certified points");
    let negative = gaps.iter().filter(|&&g| g < 0.0).count();
    let se = (ALPHA / 2.0 * (1.0 - ALPHA / 2.0) / count as f64).sqrt();
    let allowed = ALPHA / 2.0 + 3.0 * se;

    let lo = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let low_share = if range == 0.0 {
        1.0 // every gap identical: all mass at the bottom by definition
    } else {
        gaps.iter().filter(|&&g| g <= lo + 0.2 * range).count() as f64 / count as f64
    };

    println!(
        "criterion 7: {negative} of {count} gaps negative (allowed fraction {allowed:.4}), \
         range [{lo:.4}, {hi:.4}], {:.0}% in the lowest fifth (limit 80%)",
        100.0 * low_share
    );
    assert!((negative as f64 / count as f64) <= allowed);
    assert!(low_share >= 0.8);
}

#[test]
fn criterion_08_radius_differences_concentrate_below_ten_percent() {
    let (model, data) = model_05();
    // tight tolerance so capped lanes spend all three steps instead of
    // breaking early at a loose residual
    let solver = SolverConfig { tol: 1e-6, ..SolverConfig::default() };
    let n = 10_000u64;

    let rrds: Vec<f64> = (0..data.len())
        .into_par_iter()
        .filter_map(|i| {
            let x = data.input(i);
            let cfg = smoothing(0.5, n, 100, 88);
            let std_out = certify_standard(model, x, &cfg, &solver, i as u64).unwrap();
            if !(std_out.radius > 0.0) {
                return None;
            }
            let srs_cfg = SrsConfig {
                base: cfg,
                srs_steps: 3,
                warmup_steps: 60,
                restart_interval: 0,
                holdout_k: 1000,
                reference_solver: solver,
                start_from_clean: false,
            };
            let backend = DeqBackend::new(model, solver);
            let srs_out = srs_certify(&backend, x, &srs_cfg, i as u64).unwrap();
            Some((std_out.radius - srs_out.outcome.radius).abs() / std_out.radius)
        })
        .collect();

    assert!(rrds.len() >= 40, "only {} positive-baseline points", rrds.len());
    let within = rrds.iter().filter(|&&r| r <= 0.1).count();
    let share = within as f64 / rrds.len() as f64;
    let worst = rrds.iter().cloned().fold(0.0f64, f64::max);
    println!(
        "criterion 8: {within} of {} positive-baseline points within rrd 0.1 ({:.0}%, limit 90%), worst {worst:.3}",
        rrds.len(),
        100.0 * share
    );
    assert!(share >= 0.9);
}

#[test]
fn criterion_09_implicit_gradients_match_finite_differences() {
    let tight = SolverConfig {
        method: SolverMethod::Naive,
        tol: 1e-12,
        max_iters: 5000,
        ..SolverConfig::default()
    };
    let loss_of = |m: &DeqModel, x: &Vector, label: usize| {
        let solved = solve(&m.cell, x, &Vector::zeros(m.hidden_dim()), &tight).unwrap();
        cross_entropy(&logits(m, &solved.z).unwrap(), label).unwrap()
    };
    // max |a-b| scaled by the largest entry of either tensor
    let rel_gap = |a: &[f64], b: &[f64]| {
        let scale = a.iter().chain(b.iter()).fold(0.0f64, |acc, &v| acc.max(v.abs()));
        let diff =
            a.iter().zip(b.iter()).fold(0.0f64, |acc, (&p, &q)| acc.max((p - q).abs()));
        diff / (scale + 1e-9)
    };

    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + trial);
        let hidden = rng.random_range(3..7);
        let input = rng.random_range(2..5);
        let classes = rng.random_range(2..4);
        let model = DeqModel::init_random(hidden, input, classes, 0.9, 0.0, 910 + trial).unwrap();
        let x = Vector::from_fn(input, |_| rng.random_range(-1.0..1.0));
        let label = rng.random_range(0..classes);

        let ift = grad_via_ift(&model, &x, label, &tight, 5000, 1e-12).unwrap();
        assert!(!ift.truncated);
        let h = 1e-5;
        let fd_of = |mutate: &dyn Fn(&mut DeqModel, f64)| {
            let mut plus = model.clone();
            mutate(&mut plus, h);
            let mut minus = model.clone();
            mutate(&mut minus, -h);
            (loss_of(&plus, &x, label) - loss_of(&minus, &x, label)) / (2.0 * h)
        };

        let mut fd_w = Vec::new();
        for i in 0..hidden {
            for j in 0..hidden {
                fd_w.push(fd_of(&|m: &mut DeqModel, e: f64| m.cell.w[(i, j)] += e));
            }
        }
        let mut fd_u = Vec::new();
        for i in 0..hidden {
            for j in 0..input {
                fd_u.push(fd_of(&|m: &mut DeqModel, e: f64| m.cell.u[(i, j)] += e));
            }
        }
        let mut fd_b = Vec::new();
        for i in 0..hidden {
            fd_b.push(fd_of(&|m: &mut DeqModel, e: f64| m.cell.b[i] += e));
        }
        let mut fd_v = Vec::new();
        for i in 0..classes {
            for j in 0..hidden {
                fd_v.push(fd_of(&|m: &mut DeqModel, e: f64| m.readout.v[(i, j)] += e));
            }
        }
        let mut fd_c = Vec::new();
        for i in 0..classes {
            fd_c.push(fd_of(&|m: &mut DeqModel, e: f64| m.readout.c[i] += e));
        }

        for (name, fd, analytic) in [
            ("w", &fd_w, ift.w.to_rows().concat()),
            ("u", &fd_u, ift.u.to_rows().concat()),
            ("b", &fd_b, ift.b.to_vec()),
            ("v", &fd_v, ift.v.to_rows().concat()),
            ("c", &fd_c, ift.c.to_vec()),
        ] {
            let gap = rel_gap(fd, &analytic);
            worst = worst.max(gap);
            assert!(gap <= 1e-3, "trial {trial}: {name} gradient off by {gap:.2e}");
        }
    }
    println!("criterion 9: worst relative gradient gap {worst:.2e} over 20 models (limit 1e-3)");
}

#[test]
fn criterion_10_attacks_inside_the_radius_never_flip_the_vote() {
    let (model, data) = model_025();
    let solver = SolverConfig::default();
    let attack_solver = SolverConfig { tol: 1e-6, max_iters: 200, ..SolverConfig::default() };

    let results: Vec<Option<bool>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.input(i);
            let cfg = smoothing(0.25, 1000, 100, 1010);
            let out = certify_standard(model, x, &cfg, &solver, i as u64).unwrap();
            let class = out.predicted?;
            if !(out.radius > 0.0) {
                return None;
            }
            // the strongest perturbation the certificate must withstand
            let eps = 0.95 * out.radius;
            let adv = pgd_l2(model, &attack_solver, x, class, eps, 20, 0.1).unwrap();

            // fresh vote at the attacked input decides the flip
            let vote = smoothing(0.25, 1000, 100, 2020);
            let (counts, _) = mc_counts_fn(
                |xn| {
                    let res = solve(&model.cell, xn, &Vector::zeros(model.hidden_dim()), &solver)?;
                    Ok((deqsmooth::deq::classify(&logits(model, &res.z)?), res.iters as u64))
                },
                model.num_classes(),
                &adv,
                &vote,
                i as u64,
            )
            .unwrap();
            let (top, _) = top_two(&counts);
            Some(top != class)
        })
        .collect();

    let certified = results.iter().flatten().count();
    let flips = results.iter().flatten().filter(|&&f| f).count();
    println!("criterion 10: {flips} flips over {certified} certified points (limits: 0 flips, >= 200 points)");
    assert!(certified >= 200, "only {certified} certified points");
    assert_eq!(flips, 0);
}

#[test]
fn criterion_11_binomial_coverage_meets_the_confidence_level() {
    let trials = 10_000u64;
    let n = 100u64;
    for alpha in [0.05, ALPHA] {
        let confidence = 1.0 - alpha;
        for p in [0.5, 0.9, 0.99] {
            let mut rng = ChaCha8Rng::seed_from_u64(1111 + (alpha * 1e4) as u64);
            let mut covered = 0u64;
            for _ in 0..trials {
                let k = (0..n).filter(|_| rng.random::<f64>() < p).count() as u64;
                let lower = lower_conf_bound(k, n, confidence).unwrap();
                if lower <= p {
                    covered += 1;
                }
            }
            let coverage = covered as f64 / trials as f64;
            let floor =
                confidence - 3.0 * (alpha * (1.0 - alpha) / trials as f64).sqrt();
            println!(
                "criterion 11: coverage {coverage:.4} at p {p}, alpha {alpha} (floor {floor:.4})"
            );
            assert!(coverage >= floor, "coverage {coverage} below {floor} at p={p}, alpha={alpha}");
        }
    }
}
