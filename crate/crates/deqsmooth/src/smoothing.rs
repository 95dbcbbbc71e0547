//! Randomized smoothing certification with cold-start Monte Carlo sampling.
//!
//! The smoothed classifier predicts the class the base model votes for most
//! often under N(0, sigma^2 I) input noise. A one-sided Clopper-Pearson
//! bound p_a_lower on the winning vote share yields the certified radius
//! sigma * PhiInv(p_a_lower); the bound at or below 1/2 means no certifiable
//! majority and the point abstains.
//!
//! The confidence budget is alpha/2 per bound in both this module and the
//! serialized variant, so the two report comparable radii at equal total
//! failure rate alpha; the price is a slightly smaller standard radius than
//! a lone alpha bound would give.
//!
//! Sampling is generic over the per-sample classifier so that closed-form
//! surrogates (a noisy halfspace, say) can stand in for the equilibrium
//! model in tests and calibration runs.

use crate::deq::{classify, logits, DeqModel};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::solvers::{solve, SolverConfig};
use crate::stats::{gaussian_draw, inv_norm_cdf, lower_conf_bound, ConfidenceSpec, NoiseStream};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n_samples: u64,
    /// Lane count for serialized solving; plain sampling ignores it.
    pub batch_size: u64,
    pub confidence: ConfidenceSpec,
    pub seed: u64,
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Argument(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.n_samples < 1 {
            return Err(Error::Argument("n_samples must be >= 1".into()));
        }
        if self.batch_size < 1 || self.batch_size > self.n_samples {
            return Err(Error::Argument(format!(
                "batch_size must be in [1, n_samples], got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Certification result for one point. `predicted` is None on abstain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyOutcome {
    pub predicted: Option<usize>,
    /// l2 radius in input units; 0 on abstain.
    pub radius: f64,
    /// One-sided lower bound on the top class's vote probability.
    pub p_a_lower: f64,
    pub counts: Vec<u64>,
    pub top_class: usize,
    pub runner_up: usize,
    pub wall_time: f64,
    pub total_solver_iters: u64,
}

/// Top class and runner-up by count, lowest index winning ties.
pub fn top_two(counts: &[u64]) -> (usize, usize) {
    assert!(counts.len() >= 2, "need at least two classes");
    let mut top = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[top] {
            top = i;
        }
    }
    let mut runner = usize::MAX;
    for (i, &c) in counts.iter().enumerate() {
        if i != top && (runner == usize::MAX || c > counts[runner]) {
            runner = i;
        }
    }
    (top, runner)
}

/// Monte Carlo vote counts under Gaussian noise, generic in the classifier.
/// `classify_noisy` returns the predicted class and the solver iterations it
/// spent. Sample i always sees the noise of (seed, point_index, i), so counts
/// are independent of evaluation order or batching.
pub fn mc_counts_fn<C>(
    mut classify_noisy: C,
    num_classes: usize,
    x: &Vector,
    cfg: &SmoothingConfig,
    point_index: u64,
) -> Result<(Vec<u64>, u64)>
where
    C: FnMut(&Vector) -> Result<(usize, u64)>,
{
    cfg.validate()?;
    let mut counts = vec![0u64; num_classes];
    let mut total_iters = 0u64;
    for i in 0..cfg.n_samples {
        let stream = NoiseStream::new(cfg.seed, point_index, i);
        let noise = gaussian_draw(&stream, x.len(), cfg.sigma);
        let noisy = x.add(&noise);
        let (class, iters) = classify_noisy(&noisy).map_err(|e| Error::CertificationFailed {
            point: point_index,
            source: Box::new(e),
        })?;
        if class >= num_classes {
            return Err(Error::CertificationFailed {
                point: point_index,
                source: Box::new(Error::Argument(format!(
                    "classifier returned class {class} of {num_classes}"
                ))),
            });
        }
        counts[class] += 1;
        total_iters += iters;
    }
    Ok((counts, total_iters))
}

/// Cold-start classification of one noisy input through the model.
pub fn classify_cold(model: &DeqModel, x_noisy: &Vector, solver: &SolverConfig) -> Result<(usize, u64)> {
    let z0 = Vector::zeros(model.cell.hidden_dim());
    let solved = solve(&model.cell, x_noisy, &z0, solver)?;
    let class = classify(&logits(model, &solved.z)?);
    Ok((class, solved.iters as u64))
}

/// Vote counts for the equilibrium model, every sample solved cold.
pub fn mc_counts(
    model: &DeqModel,
    x: &Vector,
    cfg: &SmoothingConfig,
    solver: &SolverConfig,
    point_index: u64,
) -> Result<(Vec<u64>, u64)> {
    solver.validate()?;
    let num_classes = model.readout.v.rows();
    mc_counts_fn(|xn| classify_cold(model, xn, solver), num_classes, x, cfg, point_index)
}

/// Per-sample predictions (sample order, full N). The expensive diagnostic
/// behind the misalignment-gap metric; not part of normal certification.
pub fn sample_predictions_fn<C>(
    mut classify_noisy: C,
    x: &Vector,
    cfg: &SmoothingConfig,
    point_index: u64,
) -> Result<Vec<usize>>
where
    C: FnMut(&Vector) -> Result<(usize, u64)>,
{
    cfg.validate()?;
    let mut preds = Vec::with_capacity(cfg.n_samples as usize);
    for i in 0..cfg.n_samples {
        let stream = NoiseStream::new(cfg.seed, point_index, i);
        let noise = gaussian_draw(&stream, x.len(), cfg.sigma);
        let (class, _) = classify_noisy(&x.add(&noise))?;
        preds.push(class);
    }
    Ok(preds)
}

pub fn sample_predictions(
    model: &DeqModel,
    x: &Vector,
    cfg: &SmoothingConfig,
    solver: &SolverConfig,
    point_index: u64,
) -> Result<Vec<usize>> {
    sample_predictions_fn(|xn| classify_cold(model, xn, solver), x, cfg, point_index)
}

/// Builds the outcome from finished vote counts: Clopper-Pearson bound on
/// the winner at confidence 1 - alpha/2, abstain at or below 1/2.
pub fn outcome_from_counts(
    counts: Vec<u64>,
    cfg: &SmoothingConfig,
    total_solver_iters: u64,
    wall_time: f64,
) -> Result<CertifyOutcome> {
    let n: u64 = counts.iter().sum();
    debug_assert_eq!(n, cfg.n_samples);
    let (top_class, runner_up) = top_two(&counts);
    let p_a_lower = lower_conf_bound(counts[top_class], n, cfg.confidence.side_confidence())?;
    let (predicted, radius) = if p_a_lower > 0.5 {
        (Some(top_class), cfg.sigma * inv_norm_cdf(p_a_lower)?)
    } else {
        (None, 0.0)
    };
    Ok(CertifyOutcome {
        predicted,
        radius,
        p_a_lower,
        counts,
        top_class,
        runner_up,
        wall_time,
        total_solver_iters,
    })
}

/// Smoothing certification generic in the per-sample classifier.
pub fn certify_standard_fn<C>(
    classify_noisy: C,
    num_classes: usize,
    x: &Vector,
    cfg: &SmoothingConfig,
    point_index: u64,
) -> Result<CertifyOutcome>
where
    C: FnMut(&Vector) -> Result<(usize, u64)>,
{
    let start = std::time::Instant::now();
    let (counts, iters) = mc_counts_fn(classify_noisy, num_classes, x, cfg, point_index)?;
    outcome_from_counts(counts, cfg, iters, start.elapsed().as_secs_f64())
}

/// Standard randomized smoothing of the equilibrium model: every sample is
/// an independent cold solve.
pub fn certify_standard(
    model: &DeqModel,
    x: &Vector,
    cfg: &SmoothingConfig,
    solver: &SolverConfig,
    point_index: u64,
) -> Result<CertifyOutcome> {
    solver.validate()?;
    let num_classes = model.readout.v.rows();
    certify_standard_fn(|xn| classify_cold(model, xn, solver), num_classes, x, cfg, point_index)
}

/// Two-sided certified radius (sigma/2)(PhiInv(p_a_lower) - PhiInv(p_b_upper)).
/// With p_b_upper = 1 - p_a_lower it collapses to the one-sided formula.
pub fn radius_two_sided(p_a_lower: f64, p_b_upper: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("sigma must be > 0, got {sigma}")));
    }
    if !(0.0 < p_b_upper && p_b_upper <= p_a_lower && p_a_lower < 1.0) {
        return Err(Error::Argument(format!(
            "need 0 < p_b_upper <= p_a_lower < 1, got ({p_a_lower}, {p_b_upper})"
        )));
    }
    Ok(0.5 * sigma * (inv_norm_cdf(p_a_lower)? - inv_norm_cdf(p_b_upper)?))
}
