//! Metrics over certification reports, plus a plain gradient attack for
//! empirical soundness checks.

use crate::deq::DeqModel;
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::smoothing::CertifyOutcome;
use crate::solvers::SolverConfig;
use crate::srs::SrsOutcome;
use crate::training::loss_and_input_grad;
use serde::{Deserialize, Serialize};

pub const DEFAULT_PGD_STEPS: usize = 20;
pub const DEFAULT_PGD_STEP_SIZE: f64 = 0.1;

const PGD_ADJOINT_ITERS: usize = 300;
const PGD_ADJOINT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Standard,
    Srs,
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunMode::Standard => "standard",
            RunMode::Srs => "srs",
        })
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(RunMode::Standard),
            "srs" => Ok(RunMode::Srs),
            other => Err(Error::Argument(format!("unknown mode: {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    /// Per-point failure; the run continues and records the message.
    Failed(String),
}

/// One certified point of a report. Failed rows keep their slot (status
/// carries the message) so paired reports stay index-aligned.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub point_index: u64,
    pub status: RowStatus,
    pub mode: RunMode,
    pub true_label: usize,
    /// None encodes abstain (and failed rows).
    pub predicted: Option<usize>,
    pub radius: f64,
    pub p_a_lower: f64,
    pub top_class: usize,
    pub runner_up: usize,
    pub counts: Vec<u64>,
    pub n_a: Option<u64>,
    pub n_a_effective: Option<u64>,
    pub pm_upper: Option<f64>,
    pub iters_total: u64,
    pub iters_saved: Option<i64>,
    pub wall_time: f64,
    /// Misalignment-bound gap, present only in diagnostic runs.
    pub gap: Option<f64>,
}

impl ReportRow {
    pub fn from_standard(point_index: u64, true_label: usize, out: &CertifyOutcome) -> Self {
        ReportRow {
            point_index,
            status: RowStatus::Ok,
            mode: RunMode::Standard,
            true_label,
            predicted: out.predicted,
            radius: out.radius,
            p_a_lower: out.p_a_lower,
            top_class: out.top_class,
            runner_up: out.runner_up,
            counts: out.counts.clone(),
            n_a: None,
            n_a_effective: None,
            pm_upper: None,
            iters_total: out.total_solver_iters,
            iters_saved: None,
            wall_time: out.wall_time,
            gap: None,
        }
    }

    pub fn from_srs(point_index: u64, true_label: usize, out: &SrsOutcome) -> Self {
        ReportRow {
            point_index,
            status: RowStatus::Ok,
            mode: RunMode::Srs,
            true_label,
            predicted: out.outcome.predicted,
            radius: out.outcome.radius,
            p_a_lower: out.outcome.p_a_lower,
            top_class: out.outcome.top_class,
            runner_up: out.outcome.runner_up,
            counts: out.outcome.counts.clone(),
            n_a: Some(out.n_a),
            n_a_effective: Some(out.n_a_effective),
            pm_upper: Some(out.pm_upper),
            iters_total: out.outcome.total_solver_iters,
            iters_saved: Some(out.iters_saved),
            wall_time: out.outcome.wall_time,
            gap: None,
        }
    }

    pub fn failed(point_index: u64, true_label: usize, mode: RunMode, message: String) -> Self {
        ReportRow {
            point_index,
            status: RowStatus::Failed(message),
            mode,
            true_label,
            predicted: None,
            radius: 0.0,
            p_a_lower: 0.0,
            top_class: 0,
            runner_up: 0,
            counts: Vec::new(),
            n_a: None,
            n_a_effective: None,
            pm_upper: None,
            iters_total: 0,
            iters_saved: None,
            wall_time: 0.0,
            gap: None,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.predicted == Some(self.true_label)
    }
}

/// Fraction of rows certified correct beyond each threshold (strict:
/// radius > r). Abstained and failed rows count in the denominator.
pub fn certified_accuracy(rows: &[ReportRow], thresholds: &[f64]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::Argument("no rows".into()));
    }
    if let Some(bad) = thresholds.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::Argument(format!("thresholds must be >= 0, got {bad}")));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = rows.iter().filter(|r| r.is_correct() && r.radius > t).count();
            hits as f64 / rows.len() as f64
        })
        .collect())
}

/// Average certified radius: mean over all rows of radius when correct,
/// zero otherwise. Equals the integral of certified accuracy over all
/// thresholds.
pub fn acr(rows: &[ReportRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Argument("no rows".into()));
    }
    let sum: f64 = rows.iter().map(|r| if r.is_correct() { r.radius } else { 0.0 }).sum();
    Ok(sum / rows.len() as f64)
}

/// Relative radius difference |r_base - r_srs| / r_base, defined over
/// points with a positive baseline radius.
pub fn rrd(r_base: f64, r_srs: f64) -> Result<f64> {
    if !(r_base > 0.0) {
        return Err(Error::Argument(format!("rrd needs r_base > 0, got {r_base}")));
    }
    if !(r_srs >= 0.0) {
        return Err(Error::Argument(format!("rrd needs r_srs >= 0, got {r_srs}")));
    }
    Ok((r_base - r_srs).abs() / r_base)
}

/// Bound-vs-empirical misalignment gap for one serialized row: pm_upper
/// minus the observed rate of serialized top-class votes the reference
/// disagrees with. Needs full per-sample predictions from both solvers,
/// which only the expensive diagnostic mode produces. Nonnegative with
/// probability at least 1 - alpha/2 per point.
pub fn pm_gap(row: &ReportRow, ref_preds: &[usize], srs_preds: &[usize]) -> Result<f64> {
    if row.mode != RunMode::Srs {
        return Err(Error::Argument("gap is defined for serialized rows".into()));
    }
    let pm_upper = row
        .pm_upper
        .ok_or_else(|| Error::Argument("row lacks pm_upper".into()))?;
    let n: u64 = row.counts.iter().sum();
    if ref_preds.len() != srs_preds.len() || ref_preds.len() as u64 != n {
        return Err(Error::Dimension(format!(
            "need {n} predictions from both solvers, got {} and {}",
            ref_preds.len(),
            srs_preds.len()
        )));
    }
    let n_a = row.counts[row.top_class];
    if n_a == 0 {
        return Err(Error::Argument("no top-class votes".into()));
    }
    let misaligned = ref_preds
        .iter()
        .zip(srs_preds.iter())
        .filter(|(g, m)| m != g && **m == row.top_class)
        .count();
    Ok(pm_upper - misaligned as f64 / n_a as f64)
}

/// Projected gradient ascent on the base model's cross-entropy inside the
/// l2 ball of radius eps around x. Steps are gradient-normalized; the
/// highest-loss iterate wins (the unperturbed input is the first
/// candidate, so the result never has lower loss than x itself).
pub fn pgd_l2(
    model: &DeqModel,
    solver: &SolverConfig,
    x: &Vector,
    label: usize,
    eps: f64,
    steps: usize,
    step_size: f64,
) -> Result<Vector> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Argument(format!("eps must be >= 0, got {eps}")));
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::Argument(format!("step_size must be > 0, got {step_size}")));
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }

    let eval = |xp: &Vector| {
        loss_and_input_grad(model, xp, label, solver, PGD_ADJOINT_ITERS, PGD_ADJOINT_TOL)
    };

    let mut delta = Vector::zeros(x.len());
    let (mut best_loss, _) = eval(x)?;
    let mut best_delta = delta.clone();

    for _ in 0..steps {
        let (loss, grad) = eval(&x.add(&delta))?;
        if loss > best_loss {
            best_loss = loss;
            best_delta = delta.clone();
        }
        let g_norm = grad.norm();
        if g_norm == 0.0 {
            break;
        }
        delta.axpy(step_size / g_norm, &grad);
        let d_norm = delta.norm();
        if d_norm > eps {
            delta = delta.scale(eps / d_norm);
        }
    }
    let (loss, _) = eval(&x.add(&delta))?;
    if loss > best_loss {
        best_delta = delta;
    }
    Ok(x.add(&best_delta))
}
