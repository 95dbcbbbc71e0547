//! Serialized randomized smoothing: warm-started Monte Carlo with a
//! correlation-eliminated certificate.
//!
//! Samples are organized into batches of B lanes. The first batch solves
//! cold (from zero) under a generous warmup budget; every later batch
//! starts each lane from the fixed point the same lane reached in the
//! previous batch and gets only `srs_steps` iterations. Because nearby
//! noisy inputs have nearby fixed points, a few steps suffice; that is
//! the entire speedup.
//!
//! Warm starts couple consecutive samples, so the plain Clopper-Pearson
//! certificate no longer applies to the top-class count directly. The fix:
//! hold out K of the N samples (uniform reservoir over the whole stream),
//! re-predict them cold with the full-budget reference solver, and bound
//! the probability that a sample voted for the top class while the
//! reference disagrees. Discounting the top-class count by that bound
//! (floor rounding, the conservative direction) restores a sound radius at
//! total failure rate alpha, split alpha/2 between the two bounds.
//!
//! Sample i of point p always consumes the noise of (seed, p, i), exactly
//! like the standard path, so paired standard-vs-serialized runs see
//! identical noisy inputs sample for sample.

use crate::deq::{classify, logits, DeqModel};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::smoothing::{outcome_from_counts, CertifyOutcome, SmoothingConfig};
use crate::solvers::{solve, SolverConfig};
use crate::stats::{
    gaussian_draw, inv_norm_cdf, lower_conf_bound, uniform_index, ConfidenceSpec, NoiseStream,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SrsConfig {
    pub base: SmoothingConfig,
    /// Per-batch iteration cap once warm.
    pub srs_steps: usize,
    /// Iteration cap for the first batch and for scheduled re-warms.
    pub warmup_steps: usize,
    /// Re-warm from zero every this many batches; 0 disables.
    pub restart_interval: u64,
    /// Holdout samples re-predicted with the reference solver.
    pub holdout_k: u64,
    /// Full-budget solver defining reference predictions; its method and
    /// tolerance also drive the budget-capped batch solves.
    pub reference_solver: SolverConfig,
    /// Start every lane from the clean input's fixed point instead of the
    /// previous batch's (then warmup/restart scheduling is moot).
    pub start_from_clean: bool,
}

impl SrsConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.reference_solver.validate()?;
        if self.srs_steps < 1 {
            return Err(Error::Argument("srs_steps must be >= 1".into()));
        }
        if self.warmup_steps < self.srs_steps {
            return Err(Error::Argument(format!(
                "warmup_steps {} must be >= srs_steps {}",
                self.warmup_steps, self.srs_steps
            )));
        }
        if self.holdout_k < 1 || self.holdout_k > self.base.n_samples {
            return Err(Error::Argument(format!(
                "holdout_k must be in [1, n_samples], got {}",
                self.holdout_k
            )));
        }
        Ok(())
    }
}

/// One budget-capped solve: predicted class and the state that produced it.
#[derive(Debug, Clone)]
pub struct LaneSolve {
    pub class: usize,
    pub z: Vector,
    pub iters: u64,
    pub residual: f64,
}

/// What serialized smoothing needs from a classifier: budget-capped solves
/// from a caller-chosen initial state, plus a full-budget cold reference.
/// The equilibrium model is the real backend; analytic surrogates implement
/// the same trait for soundness tests.
pub trait SrsBackend {
    fn num_classes(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn solve_lane(&self, x_noisy: &Vector, init: &Vector, budget: usize) -> Result<LaneSolve>;
    fn reference_predict(&self, x_noisy: &Vector) -> Result<LaneSolve>;
}

/// The equilibrium model under a fixed reference solver configuration.
pub struct DeqBackend<'a> {
    pub model: &'a DeqModel,
    pub solver: SolverConfig,
}

impl<'a> DeqBackend<'a> {
    pub fn new(model: &'a DeqModel, solver: SolverConfig) -> Self {
        DeqBackend { model, solver }
    }
}

impl SrsBackend for DeqBackend<'_> {
    fn num_classes(&self) -> usize {
        self.model.readout.v.rows()
    }

    fn state_dim(&self) -> usize {
        self.model.cell.hidden_dim()
    }

    fn solve_lane(&self, x_noisy: &Vector, init: &Vector, budget: usize) -> Result<LaneSolve> {
        let cfg = self.solver.with_max_iters(budget);
        let solved = solve(&self.model.cell, x_noisy, init, &cfg)?;
        let class = classify(&logits(self.model, &solved.z)?);
        Ok(LaneSolve {
            class,
            z: solved.z,
            iters: solved.iters as u64,
            residual: solved.residual,
        })
    }

    fn reference_predict(&self, x_noisy: &Vector) -> Result<LaneSolve> {
        let init = Vector::zeros(self.state_dim());
        self.solve_lane(x_noisy, &init, self.solver.max_iters)
    }
}

/// Fixed points carried between batches, one lane per batch slot.
#[derive(Debug, Clone)]
pub struct SrsState {
    pub prev_z: Vec<Vector>,
    pub batches_done: u64,
}

impl SrsState {
    pub fn cold(lanes: usize, state_dim: usize) -> Self {
        SrsState {
            prev_z: vec![Vector::zeros(state_dim); lanes],
            batches_done: 0,
        }
    }

    pub fn reset_to(&mut self, z: &Vector) {
        for lane in self.prev_z.iter_mut() {
            *lane = z.clone();
        }
    }

    pub fn reset_cold(&mut self) {
        let dim = self.prev_z[0].len();
        self.reset_to(&Vector::zeros(dim));
    }
}

/// Solves one batch of noisy inputs, lane i starting from `state.prev_z[i]`
/// with the given iteration budget, and advances the state to the new fixed
/// points. Lane count may be short on the final batch.
pub fn warm_start_solve_batch<B: SrsBackend>(
    backend: &B,
    noisy_batch: &[Vector],
    state: &mut SrsState,
    steps: usize,
) -> Result<Vec<LaneSolve>> {
    if noisy_batch.len() > state.prev_z.len() {
        return Err(Error::Dimension(format!(
            "batch of {} lanes exceeds state with {}",
            noisy_batch.len(),
            state.prev_z.len()
        )));
    }
    let mut solves = Vec::with_capacity(noisy_batch.len());
    for (lane, x_noisy) in noisy_batch.iter().enumerate() {
        let solved = backend
            .solve_lane(x_noisy, &state.prev_z[lane], steps)
            .map_err(|e| match e {
                Error::Numerical { iter, what } => Error::Numerical {
                    iter,
                    what: format!("lane {lane}: {what}"),
                },
                other => other,
            })?;
        state.prev_z[lane] = solved.z.clone();
        solves.push(solved);
    }
    state.batches_done += 1;
    Ok(solves)
}

/// The K held-out samples with their serialized and reference predictions.
#[derive(Debug, Clone)]
pub struct HoldoutRecord {
    pub sample_indices: Vec<u64>,
    pub x_m: Vec<Vector>,
    pub y_m: Vec<usize>,
    pub y_g: Vec<usize>,
    pub n1: u64,
    pub n2: u64,
    pub pm_upper: f64,
}

/// Upper confidence bound on the misalignment probability: among holdout
/// samples the serialized run assigned to the top class, how often may the
/// reference disagree? Returns (n1, n2, pm_upper) where n1 counts agreement
/// on the top class, n2 the serialized top-class votes, and
/// pm_upper = 1 - lower_conf_bound(n1, n2). No top-class votes in the
/// holdout means no evidence, so the bound degrades to 1.
pub fn estimate_pm_upper(
    y_m: &[usize],
    y_g: &[usize],
    c_a: usize,
    conf: &ConfidenceSpec,
) -> Result<(u64, u64, f64)> {
    if y_m.len() != y_g.len() {
        return Err(Error::Dimension(format!(
            "{} serialized vs {} reference holdout predictions",
            y_m.len(),
            y_g.len()
        )));
    }
    let n1 = y_m
        .iter()
        .zip(y_g.iter())
        .filter(|(m, g)| m == g && **g == c_a)
        .count() as u64;
    let n2 = y_m.iter().filter(|&&m| m == c_a).count() as u64;
    if n2 == 0 {
        return Ok((0, 0, 1.0));
    }
    let pm = 1.0 - lower_conf_bound(n1, n2, conf.side_confidence())?;
    Ok((n1, n2, pm))
}

/// Top-class count discounted by the misalignment bound, floored so the
/// certificate never rounds in its own favor.
pub fn effective_count(n_a: u64, pm_upper: f64) -> u64 {
    assert!((0.0..=1.0).contains(&pm_upper), "pm_upper {pm_upper} outside [0,1]");
    (n_a as f64 * (1.0 - pm_upper)).floor() as u64
}

/// Everything the standard outcome reports, plus the discount trail.
#[derive(Debug, Clone)]
pub struct SrsOutcome {
    pub outcome: CertifyOutcome,
    pub n_a: u64,
    pub n_a_effective: u64,
    pub pm_upper: f64,
    pub holdout: HoldoutRecord,
    /// Reference-budget iterations (N x full budget) minus iterations
    /// actually spent, holdout re-prediction included.
    pub iters_saved: i64,
}

struct Reservoir {
    k: usize,
    indices: Vec<u64>,
    inputs: Vec<Vector>,
    preds: Vec<usize>,
    seed: u64,
    point_index: u64,
}

impl Reservoir {
    fn new(k: usize, seed: u64, point_index: u64) -> Self {
        Reservoir {
            k,
            indices: Vec::with_capacity(k),
            inputs: Vec::with_capacity(k),
            preds: Vec::with_capacity(k),
            seed,
            point_index,
        }
    }

    // Algorithm R: sample i replaces a uniformly chosen slot of [0, i] if
    // that slot lands inside the reservoir. The index draw is keyed by the
    // same (seed, point, sample) triple as the noise but under a distinct
    // domain tag, so it neither reuses nor disturbs the Gaussian stream.
    fn offer(&mut self, i: u64, x_noisy: &Vector, pred: usize) {
        if self.indices.len() < self.k {
            self.indices.push(i);
            self.inputs.push(x_noisy.clone());
            self.preds.push(pred);
            return;
        }
        let stream = NoiseStream::new(self.seed, self.point_index, i);
        let j = uniform_index(&stream, i + 1);
        if (j as usize) < self.k {
            self.indices[j as usize] = i;
            self.inputs[j as usize] = x_noisy.clone();
            self.preds[j as usize] = pred;
        }
    }
}

fn srs_certify_inner<B: SrsBackend>(
    backend: &B,
    x: &Vector,
    cfg: &SrsConfig,
    point_index: u64,
    collect_preds: bool,
) -> Result<(SrsOutcome, Option<Vec<usize>>)> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let n = cfg.base.n_samples;
    let bsz = cfg.base.batch_size;
    let num_batches = n.div_ceil(bsz);
    let num_classes = backend.num_classes();
    let sigma = cfg.base.sigma;

    let mut counts = vec![0u64; num_classes];
    let mut total_iters = 0u64;
    let mut reservoir = Reservoir::new(cfg.holdout_k as usize, cfg.base.seed, point_index);
    let mut all_preds = if collect_preds { Some(Vec::with_capacity(n as usize)) } else { None };

    let fail = |e: Error| Error::CertificationFailed { point: point_index, source: Box::new(e) };

    // clean-start mode solves the unperturbed input once and reuses its
    // fixed point as every lane's initial state
    let clean_z = if cfg.start_from_clean {
        let init = Vector::zeros(backend.state_dim());
        let solved = backend.solve_lane(x, &init, cfg.warmup_steps).map_err(fail)?;
        total_iters += solved.iters;
        Some(solved.z)
    } else {
        None
    };

    let mut state = SrsState::cold(bsz as usize, backend.state_dim());
    for batch in 0..num_batches {
        let lanes = (bsz).min(n - batch * bsz);
        let budget = if let Some(ref z) = clean_z {
            state.reset_to(z);
            cfg.srs_steps
        } else if batch == 0 || (cfg.restart_interval > 0 && batch % cfg.restart_interval == 0) {
            state.reset_cold();
            cfg.warmup_steps
        } else {
            cfg.srs_steps
        };

        let mut noisy_batch = Vec::with_capacity(lanes as usize);
        for lane in 0..lanes {
            let i = batch * bsz + lane;
            let stream = NoiseStream::new(cfg.base.seed, point_index, i);
            noisy_batch.push(x.add(&gaussian_draw(&stream, x.len(), sigma)));
        }

        let solves = warm_start_solve_batch(backend, &noisy_batch, &mut state, budget).map_err(fail)?;
        for (lane, solved) in solves.iter().enumerate() {
            if solved.class >= num_classes {
                return Err(fail(Error::Argument(format!(
                    "backend returned class {} of {num_classes}",
                    solved.class
                ))));
            }
            counts[solved.class] += 1;
            total_iters += solved.iters;
            let i = batch * bsz + lane as u64;
            reservoir.offer(i, &noisy_batch[lane], solved.class);
            if let Some(ref mut preds) = all_preds {
                preds.push(solved.class);
            }
        }
    }

    let (c_a, _) = crate::smoothing::top_two(&counts);
    let n_a = counts[c_a];

    // reference re-prediction of the holdout
    let mut y_g = Vec::with_capacity(reservoir.inputs.len());
    for x_m in &reservoir.inputs {
        let solved = backend.reference_predict(x_m).map_err(fail)?;
        total_iters += solved.iters;
        y_g.push(solved.class);
    }

    let (n1, n2, pm_upper) =
        estimate_pm_upper(&reservoir.preds, &y_g, c_a, &cfg.base.confidence)?;
    let n_a_effective = effective_count(n_a, pm_upper);

    let p_a_lower = lower_conf_bound(n_a_effective, n, cfg.base.confidence.side_confidence())?;
    let mut outcome = outcome_from_counts(counts, &cfg.base, total_iters, 0.0)?;
    // the discounted bound replaces the raw-count bound everywhere
    outcome.p_a_lower = p_a_lower;
    if p_a_lower > 0.5 {
        outcome.predicted = Some(c_a);
        outcome.radius = sigma * inv_norm_cdf(p_a_lower)?;
    } else {
        outcome.predicted = None;
        outcome.radius = 0.0;
    }
    outcome.wall_time = start.elapsed().as_secs_f64();

    let holdout = HoldoutRecord {
        sample_indices: reservoir.indices,
        x_m: reservoir.inputs,
        y_m: reservoir.preds,
        y_g,
        n1,
        n2,
        pm_upper,
    };
    let iters_saved = (n as i64) * (cfg.reference_solver.max_iters as i64) - total_iters as i64;

    Ok((
        SrsOutcome {
            outcome,
            n_a,
            n_a_effective,
            pm_upper,
            holdout,
            iters_saved,
        },
        all_preds,
    ))
}

/// Serialized randomized smoothing certification of one point.
pub fn srs_certify<B: SrsBackend>(
    backend: &B,
    x: &Vector,
    cfg: &SrsConfig,
    point_index: u64,
) -> Result<SrsOutcome> {
    Ok(srs_certify_inner(backend, x, cfg, point_index, false)?.0)
}

/// As [`srs_certify`], additionally returning every sample's serialized
/// prediction in stream order, the input to the misalignment-gap
/// diagnostic, which re-predicts all N samples with the reference solver.
pub fn srs_certify_with_predictions<B: SrsBackend>(
    backend: &B,
    x: &Vector,
    cfg: &SrsConfig,
    point_index: u64,
) -> Result<(SrsOutcome, Vec<usize>)> {
    let (outcome, preds) = srs_certify_inner(backend, x, cfg, point_index, true)?;
    Ok((outcome, preds.expect("predictions collected")))
}

/// Largest radius either certificate can emit at vote ratio `ratio`: the
/// ceiling comes from the confidence bound alone, independent of any model.
/// Returns (standard, serialized). The serialized ceiling discounts by the
/// best achievable misalignment bound, a perfectly consistent holdout of
/// size `k_holdout`.
pub fn cutoff_radius(
    ratio: f64,
    n: u64,
    k_holdout: u64,
    alpha: f64,
    sigma: f64,
) -> Result<(f64, f64)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Argument(format!("ratio must be in (0,1], got {ratio}")));
    }
    if n < 1 || k_holdout < 1 {
        return Err(Error::Argument("n and k_holdout must be >= 1".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("sigma must be > 0, got {sigma}")));
    }
    let conf = ConfidenceSpec::new(alpha)?.side_confidence();

    let radius_of = |k: u64| -> Result<f64> {
        let p = lower_conf_bound(k, n, conf)?;
        if p > 0.5 {
            Ok(sigma * inv_norm_cdf(p)?)
        } else {
            Ok(0.0)
        }
    };

    let k_base = (n as f64 * ratio).round() as u64;
    let r_base = radius_of(k_base.min(n))?;

    let pm = 1.0 - lower_conf_bound(k_holdout, k_holdout, conf)?;
    let k_srs = ((1.0 - pm) * n as f64 * ratio).floor() as u64;
    let r_srs = radius_of(k_srs.min(n))?;
    Ok((r_base, r_srs))
}
