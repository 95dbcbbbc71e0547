//! Fixed-point solvers for the equilibrium cell.
//!
//! All three methods share one driver: each iteration applies the cell once,
//! records the relative residual ||f(z) - z|| / (||f(z)|| + 1e-8), and keeps
//! the best post-step iterate seen so far. The returned state is always the
//! lowest-residual one, so a warm start can never be made worse than it
//! began, and a 1-iteration budget still advances the state by one cell
//! application (what a serialized 1-step solve needs).
//!
//! - naive: z <- f(z), linear convergence at the contraction rate
//! - anderson: type-II acceleration; least squares over the residual
//!   differences of a short history window, ridge-stabilized, with a damped
//!   combination of the z- and f-sides
//! - broyden: the "good" rank-one secant update kept directly on the inverse
//!   Jacobian of g(z) = f(z) - z, no line search, step length capped

use crate::deq::{cell_forward, DeqCellParams};
use crate::error::{Error, Result};
use crate::linalg::{dense_solve, Matrix, Vector};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

const RESIDUAL_FLOOR: f64 = 1e-8;
// A quasi-Newton step on a gamma-contraction is at most ||g||/(1-gamma);
// anything far beyond that is a broken update, not progress.
const BROYDEN_STEP_CAP: f64 = 20.0;
const BROYDEN_DENOM_MIN: f64 = 1e-12;
const FALLBACK_DAMPING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Naive,
    Anderson,
    Broyden,
}

impl std::fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolverMethod::Naive => "naive",
            SolverMethod::Anderson => "anderson",
            SolverMethod::Broyden => "broyden",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SolverMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(SolverMethod::Naive),
            "anderson" => Ok(SolverMethod::Anderson),
            "broyden" => Ok(SolverMethod::Broyden),
            other => Err(Error::Argument(format!("unknown solver method: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// Relative residual target.
    pub tol: f64,
    pub max_iters: usize,
    /// Retained (z, f(z)) pairs; 1 degenerates to damped naive steps.
    pub anderson_memory: usize,
    /// Mixing weight beta in (0, 1]; 1 is undamped.
    pub anderson_damping: f64,
    /// Ridge weight on the acceleration least squares.
    pub anderson_ridge: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::Anderson,
            tol: 1e-3,
            max_iters: 30,
            anderson_memory: 5,
            anderson_damping: 1.0,
            anderson_ridge: 1e-4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Argument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters < 1 {
            return Err(Error::Argument("max_iters must be >= 1".into()));
        }
        if self.anderson_memory < 1 {
            return Err(Error::Argument("anderson_memory must be >= 1".into()));
        }
        if !(self.anderson_damping > 0.0 && self.anderson_damping <= 1.0) {
            return Err(Error::Argument(format!(
                "anderson_damping must be in (0,1], got {}",
                self.anderson_damping
            )));
        }
        if !(self.anderson_ridge >= 0.0 && self.anderson_ridge.is_finite()) {
            return Err(Error::Argument(format!(
                "anderson_ridge must be >= 0, got {}",
                self.anderson_ridge
            )));
        }
        Ok(())
    }

    /// Same solver with a different iteration budget (serialized solves swap
    /// budgets between warmup and steady-state batches).
    pub fn with_max_iters(&self, max_iters: usize) -> Self {
        SolverConfig { max_iters, ..*self }
    }
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    /// Best iterate found (post-step state at the lowest recorded residual).
    pub z: Vector,
    pub residual: f64,
    pub iters: usize,
    /// True exactly when `residual <= tol`.
    pub converged: bool,
    /// One relative residual per iteration, oldest first.
    pub residual_trace: Vec<f64>,
    /// Iterations where acceleration fell back to a damped naive step
    /// (ill-conditioned least squares, vanishing secant denominator).
    pub fallback_steps: usize,
}

fn relative_residual(g_norm: f64, fz_norm: f64) -> f64 {
    g_norm / (fz_norm + RESIDUAL_FLOOR)
}

/// One plain iteration of the cell.
pub fn step_naive(cell: &DeqCellParams, z: &Vector, x: &Vector) -> Result<Vector> {
    cell_forward(cell, z, x)
}

/// Type-II Anderson acceleration over a sliding window of (z, f(z)) pairs.
#[derive(Debug, Clone)]
pub struct AndersonState {
    memory: usize,
    damping: f64,
    ridge: f64,
    history: VecDeque<(Vector, Vector)>,
}

impl AndersonState {
    pub fn new(memory: usize, damping: f64, ridge: f64) -> Self {
        AndersonState {
            memory: memory.max(1),
            damping,
            ridge,
            history: VecDeque::new(),
        }
    }

    /// Pushes the current pair and returns the accelerated next iterate.
    /// Returns `(next, fell_back)`; `fell_back` marks steps where the least
    /// squares system could not be solved and a damped naive step was taken.
    pub fn step(&mut self, z: &Vector, fz: &Vector) -> (Vector, bool) {
        self.history.push_back((z.clone(), fz.clone()));
        if self.history.len() > self.memory {
            self.history.pop_front();
        }

        let beta = self.damping;
        let g_now = fz.sub(z);
        if self.history.len() == 1 {
            // no differences yet: naive step, damped if requested
            return (self.damped_naive(z, fz, &g_now), false);
        }

        let pairs: Vec<&(Vector, Vector)> = self.history.iter().collect();
        let m = pairs.len() - 1; // difference columns
        let dim = z.len();
        let res = |i: usize| pairs[i].1.sub(&pairs[i].0);
        let dg: Vec<Vector> = (0..m).map(|j| res(j + 1).sub(&res(j))).collect();
        let dz: Vec<Vector> = (0..m).map(|j| pairs[j + 1].0.sub(&pairs[j].0)).collect();

        // normal equations with ridge: (DG^T DG + ridge I) gamma = DG^T g
        let mut gram = Matrix::from_fn(m, m, |i, j| dg[i].dot(&dg[j]));
        for i in 0..m {
            gram[(i, i)] += self.ridge;
        }
        let rhs = Vector::from_fn(m, |i| dg[i].dot(&g_now));
        let gamma = match dense_solve(&gram, &rhs) {
            Ok(gamma) if gamma.is_finite() => gamma,
            _ => return (self.damped_naive(z, fz, &g_now), true),
        };

        // z+ = z + beta g - sum_j gamma_j (dz_j + beta dg_j)
        let mut next = z.clone();
        next.axpy(beta, &g_now);
        for j in 0..m {
            next.axpy(-gamma[j], &dz[j]);
            next.axpy(-gamma[j] * beta, &dg[j]);
        }
        if !next.is_finite() {
            return (self.damped_naive(z, fz, &g_now), true);
        }
        debug_assert_eq!(next.len(), dim);
        (next, false)
    }

    fn damped_naive(&self, z: &Vector, fz: &Vector, g: &Vector) -> Vector {
        if self.damping == 1.0 {
            fz.clone()
        } else {
            let mut next = z.clone();
            next.axpy(self.damping, g);
            next
        }
    }
}

/// "Good" Broyden secant method on g(z) = f(z) - z, tracking the inverse
/// Jacobian densely. The state starts at -I, so the first step coincides
/// with a naive iteration.
#[derive(Debug, Clone)]
pub struct BroydenState {
    inv_jac: Matrix,
    prev: Option<(Vector, Vector)>,
}

impl BroydenState {
    pub fn new(dim: usize) -> Self {
        let mut inv_jac = Matrix::zeros(dim, dim);
        for i in 0..dim {
            inv_jac[(i, i)] = -1.0;
        }
        BroydenState { inv_jac, prev: None }
    }

    /// Updates the inverse Jacobian from the last secant pair and returns
    /// the next iterate. `(next, skipped)`: a vanishing update denominator
    /// skips the update and takes a damped naive step instead.
    pub fn step(&mut self, z: &Vector, g: &Vector) -> (Vector, bool) {
        let mut skipped = false;
        if let Some((pz, pg)) = self.prev.take() {
            let dz = z.sub(&pz);
            let dgv = g.sub(&pg);
            let b_dg = self.inv_jac.matvec(&dgv).expect("square state");
            let zt_b = self.inv_jac.matvec_t(&dz).expect("square state");
            let denom = zt_b.dot(&dgv);
            if denom.abs() < BROYDEN_DENOM_MIN {
                skipped = true;
            } else {
                let num = dz.sub(&b_dg);
                let inv_denom = 1.0 / denom;
                for i in 0..num.len() {
                    let ni = num[i] * inv_denom;
                    if ni != 0.0 {
                        for j in 0..zt_b.len() {
                            self.inv_jac[(i, j)] += ni * zt_b[j];
                        }
                    }
                }
            }
        }
        self.prev = Some((z.clone(), g.clone()));

        if skipped {
            let mut next = z.clone();
            next.axpy(FALLBACK_DAMPING, g);
            return (next, true);
        }

        // z+ = z - B^{-1} g, with the displacement capped
        let mut p = self.inv_jac.matvec(g).expect("square state");
        let p_norm = p.norm();
        let cap = BROYDEN_STEP_CAP * g.norm();
        if p_norm > cap && p_norm > 0.0 {
            p = p.scale(cap / p_norm);
        }
        (z.sub(&p), false)
    }
}

/// Runs the configured solver on an arbitrary fixed-point map. This is the
/// driver behind [`solve`]; taking the map as a closure keeps it testable
/// against affine surrogates with known solutions.
pub fn solve_map<F>(mut f: F, z0: &Vector, cfg: &SolverConfig) -> Result<SolverResult>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    cfg.validate()?;

    let mut anderson = match cfg.method {
        SolverMethod::Anderson => Some(AndersonState::new(
            cfg.anderson_memory,
            cfg.anderson_damping,
            cfg.anderson_ridge,
        )),
        _ => None,
    };
    let mut broyden = match cfg.method {
        SolverMethod::Broyden => Some(BroydenState::new(z0.len())),
        _ => None,
    };

    let mut z = z0.clone();
    let mut best: Option<(Vector, f64)> = None;
    let mut trace = Vec::new();
    let mut fallback_steps = 0usize;

    for iter in 1..=cfg.max_iters {
        let fz = f(&z)?;
        if fz.len() != z.len() {
            return Err(Error::Dimension(format!(
                "map changed dimension from {} to {}",
                z.len(),
                fz.len()
            )));
        }
        if !fz.is_finite() {
            return Err(Error::Numerical {
                iter,
                what: "map produced a non-finite value".into(),
            });
        }
        let g = fz.sub(&z);
        let r = relative_residual(g.norm(), fz.norm());
        trace.push(r);
        if best.as_ref().map_or(true, |(_, br)| r < *br) {
            best = Some((fz.clone(), r));
        }
        if r <= cfg.tol {
            break;
        }

        z = match cfg.method {
            SolverMethod::Naive => fz,
            SolverMethod::Anderson => {
                let (next, fell_back) = anderson.as_mut().expect("anderson state").step(&z, &fz);
                if fell_back {
                    fallback_steps += 1;
                }
                next
            }
            SolverMethod::Broyden => {
                let (next, skipped) = broyden.as_mut().expect("broyden state").step(&z, &g);
                if skipped {
                    fallback_steps += 1;
                }
                next
            }
        };
        if !z.is_finite() {
            return Err(Error::Numerical {
                iter,
                what: "solver step produced a non-finite iterate".into(),
            });
        }
    }

    let (z, residual) = best.expect("max_iters >= 1 guarantees one iteration");
    Ok(SolverResult {
        z,
        residual,
        iters: trace.len(),
        converged: residual <= cfg.tol,
        residual_trace: trace,
        fallback_steps,
    })
}

/// Solves z = f(z, x) for the equilibrium cell from the given start.
pub fn solve(
    cell: &DeqCellParams,
    x: &Vector,
    z0: &Vector,
    cfg: &SolverConfig,
) -> Result<SolverResult> {
    solve_map(|z| cell_forward(cell, z, x), z0, cfg)
}
