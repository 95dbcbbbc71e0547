//! Gaussian-augmented training of the equilibrium model.
//!
//! Gradients go through the fixed point implicitly: with z* = f(z*, x) and
//! loss gradient v = dL/dz*, the adjoint u solves u = v + J^T u where
//! J = df/dz at the fixed point. Because the cell is a gamma-contraction the
//! adjoint iteration converges geometrically, no dense solve needed.
//! Parameter gradients then follow from the chain rule through f's direct
//! parameter dependence.

use crate::dataset::Dataset;
use crate::deq::{rescale_to_contraction, DeqModel};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::solvers::{solve, SolverConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Augmentation noise level; each example gets one fresh draw per step.
    pub sigma: f64,
    pub epochs: usize,
    /// Zero is allowed and leaves the model bitwise unchanged.
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub adjoint_iters: usize,
    pub adjoint_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigma: 0.0,
            epochs: 50,
            lr: 0.2,
            batch_size: 32,
            seed: 0,
            // training wants tighter solves than certification defaults
            solver: SolverConfig { tol: 1e-6, max_iters: 100, ..SolverConfig::default() },
            adjoint_iters: 200,
            adjoint_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Argument(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.epochs < 1 {
            return Err(Error::Argument("epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if self.adjoint_iters < 1 {
            return Err(Error::Argument("adjoint_iters must be >= 1".into()));
        }
        if !(self.adjoint_tol > 0.0 && self.adjoint_tol.is_finite()) {
            return Err(Error::Argument(format!(
                "adjoint_tol must be > 0, got {}",
                self.adjoint_tol
            )));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    /// Global step index across the whole run.
    pub step: usize,
    pub loss: f64,
}

/// Loss, all parameter gradients, and the input gradient at one example.
#[derive(Debug, Clone)]
pub struct IftGradients {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vector,
    pub v: Matrix,
    pub c: Vector,
    /// dL/dx, used by the gradient attack.
    pub input: Vector,
    pub loss: f64,
    /// True when the adjoint did not reach tolerance and the gradient fell
    /// back to the truncated one-application form (u = v).
    pub truncated: bool,
}

pub fn softmax(logits: &Vector) -> Vector {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector::from_fn(logits.len(), |i| exps[i] / sum)
}

/// -log softmax(logits)[label], with max-subtraction so huge logits stay
/// finite.
pub fn cross_entropy(logits: &Vector, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    Ok(max + sum.ln() - logits[label])
}

/// Fixed-point iteration for u = v + W^T (d ∘ u). Returns the final iterate
/// and whether tolerance was reached within the budget.
fn adjoint_solve(w: &Matrix, d: &Vector, v: &Vector, iters: usize, tol: f64) -> (Vector, bool) {
    let mut u = v.clone();
    for _ in 0..iters {
        let du = Vector::from_fn(u.len(), |i| d[i] * u[i]);
        let next = v.add(&w.matvec_t(&du).expect("square cell"));
        let step = next.sub(&u).norm();
        let done = step <= tol * (next.norm() + 1e-8);
        u = next;
        if done {
            return (u, true);
        }
    }
    (u, false)
}

fn outer_acc(m: &mut Matrix, a: &Vector, b: &Vector, scale: f64) {
    for i in 0..a.len() {
        let s = scale * a[i];
        if s != 0.0 {
            for j in 0..b.len() {
                m[(i, j)] += s * b[j];
            }
        }
    }
}

/// Loss and gradients at one (input, label) pair, differentiating through
/// the fixed point via the adjoint equation.
pub fn grad_via_ift(
    model: &DeqModel,
    x: &Vector,
    label: usize,
    solver: &SolverConfig,
    adjoint_iters: usize,
    adjoint_tol: f64,
) -> Result<IftGradients> {
    let hidden = model.cell.hidden_dim();
    let solved = solve(&model.cell, x, &Vector::zeros(hidden), solver)?;
    let z = solved.z;

    let logit = crate::deq::logits(model, &z)?;
    let loss = cross_entropy(&logit, label)?;
    let p = softmax(&logit);
    // dL/dlogits = softmax - onehot
    let mut dlogit = p;
    dlogit[label] -= 1.0;

    // v = V^T dlogit; the solver returns a tanh image, so 1 - z^2 is the
    // activation derivative at that application's pre-activation
    let v_adj = model.readout.v.matvec_t(&dlogit)?;
    let d = Vector::from_fn(hidden, |i| 1.0 - z[i] * z[i]);
    let (u_adj, converged) = adjoint_solve(&model.cell.w, &d, &v_adj, adjoint_iters, adjoint_tol);
    let (u_adj, truncated) = if converged { (u_adj, false) } else { (v_adj.clone(), true) };

    let h = Vector::from_fn(hidden, |i| d[i] * u_adj[i]);
    let mut grad_w = Matrix::zeros(hidden, hidden);
    outer_acc(&mut grad_w, &h, &z, 1.0);
    let mut grad_u = Matrix::zeros(hidden, x.len());
    outer_acc(&mut grad_u, &h, x, 1.0);
    let mut grad_v = Matrix::zeros(dlogit.len(), hidden);
    outer_acc(&mut grad_v, &dlogit, &z, 1.0);
    let grad_x = model.cell.u.matvec_t(&h)?;

    Ok(IftGradients {
        w: grad_w,
        u: grad_u,
        b: h,
        v: grad_v,
        c: dlogit,
        input: grad_x,
        loss,
        truncated,
    })
}

/// Loss and input gradient only; the gradient attack's workhorse.
pub fn loss_and_input_grad(
    model: &DeqModel,
    x: &Vector,
    label: usize,
    solver: &SolverConfig,
    adjoint_iters: usize,
    adjoint_tol: f64,
) -> Result<(f64, Vector)> {
    let g = grad_via_ift(model, x, label, solver, adjoint_iters, adjoint_tol)?;
    Ok((g.loss, g.input))
}

struct GradAccum {
    w: Matrix,
    u: Matrix,
    b: Vector,
    v: Matrix,
    c: Vector,
}

impl GradAccum {
    fn zeros(model: &DeqModel) -> Self {
        let h = model.cell.hidden_dim();
        let d = model.cell.input_dim();
        let k = model.readout.v.rows();
        GradAccum {
            w: Matrix::zeros(h, h),
            u: Matrix::zeros(h, d),
            b: Vector::zeros(h),
            v: Matrix::zeros(k, h),
            c: Vector::zeros(k),
        }
    }

    fn add(&mut self, g: &IftGradients, weight: f64) {
        self.w.add_scaled_in_place(weight, &g.w);
        self.u.add_scaled_in_place(weight, &g.u);
        self.b.axpy(weight, &g.b);
        self.v.add_scaled_in_place(weight, &g.v);
        self.c.axpy(weight, &g.c);
    }
}

/// Minibatch SGD on Gaussian-augmented cross-entropy. Returns the trained
/// model and one loss record per step. Deterministic in the seed: the same
/// seed reproduces the shuffle order, every noise draw, and the final
/// weights exactly.
pub fn train(model: &DeqModel, data: &Dataset, cfg: &TrainConfig) -> Result<(DeqModel, Vec<LossRecord>)> {
    cfg.validate()?;
    if data.dim() != model.cell.input_dim() {
        return Err(Error::Dimension(format!(
            "dataset dimension {} vs model input dimension {}",
            data.dim(),
            model.cell.input_dim()
        )));
    }
    if data.num_classes() != model.readout.v.rows() {
        return Err(Error::Dimension(format!(
            "dataset has {} classes but model has {} outputs",
            data.num_classes(),
            model.readout.v.rows()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model.clone();
    let mut trace = Vec::new();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = GradAccum::zeros(&model);
            let mut batch_loss = 0.0;
            let weight = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let mut x = data.input(i).clone();
                if cfg.sigma > 0.0 {
                    for j in 0..x.len() {
                        x[j] += cfg.sigma * sample_gaussian(&mut rng);
                    }
                }
                let g = grad_via_ift(
                    &model,
                    &x,
                    data.label(i),
                    &cfg.solver,
                    cfg.adjoint_iters,
                    cfg.adjoint_tol,
                )?;
                batch_loss += weight * g.loss;
                grads.add(&g, weight);
            }
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { step: global_step });
            }

            model.cell.w.add_scaled_in_place(-cfg.lr, &grads.w);
            model.cell.u.add_scaled_in_place(-cfg.lr, &grads.u);
            model.cell.b.axpy(-cfg.lr, &grads.b);
            model.readout.v.add_scaled_in_place(-cfg.lr, &grads.v);
            model.readout.c.axpy(-cfg.lr, &grads.c);
            model.cell = rescale_to_contraction(&model.cell);

            trace.push(LossRecord { epoch, step: global_step, loss: batch_loss });
            global_step += 1;
        }
    }
    Ok((model, trace))
}

fn sample_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fraction of points whose clean (noise-free) prediction matches the label.
pub fn clean_accuracy(model: &DeqModel, data: &Dataset, solver: &SolverConfig) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..data.len() {
        let solved = solve(&model.cell, data.input(i), &Vector::zeros(model.cell.hidden_dim()), solver)?;
        let logit = crate::deq::logits(model, &solved.z)?;
        if crate::deq::classify(&logit) == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::blobs;
    use crate::deq::{model_to_json, DeqModel};
    use crate::linalg::spectral_norm_estimate;
    use rand::Rng;

    fn tight_solver() -> SolverConfig {
        SolverConfig {
            method: crate::solvers::SolverMethod::Naive,
            tol: 1e-12,
            max_iters: 5000,
            ..SolverConfig::default()
        }
    }

    fn loss_of(model: &DeqModel, x: &Vector, label: usize) -> f64 {
        let solved = solve(&model.cell, x, &Vector::zeros(model.cell.hidden_dim()), &tight_solver()).unwrap();
        cross_entropy(&crate::deq::logits(model, &solved.z).unwrap(), label).unwrap()
    }

    // max |a-b| scaled by the largest entry of either tensor
    fn rel_gap(a: &[f64], b: &[f64]) -> f64 {
        let scale = a
            .iter()
            .chain(b.iter())
            .fold(0.0f64, |acc, &x| acc.max(x.abs()));
        let diff = a
            .iter()
            .zip(b.iter())
            .fold(0.0f64, |acc, (&x, &y)| acc.max((x - y).abs()));
        diff / (scale + 1e-9)
    }

    fn fd_check(model: &DeqModel, x: &Vector, label: usize, tol: f64) {
        let ift = grad_via_ift(model, x, label, &tight_solver(), 5000, 1e-12).unwrap();
        assert!(!ift.truncated);
        let h = 1e-5;

        let fd_of = |mutate: &dyn Fn(&mut DeqModel, f64)| {
            let mut plus = model.clone();
            mutate(&mut plus, h);
            let mut minus = model.clone();
            mutate(&mut minus, -h);
            (loss_of(&plus, x, label) - loss_of(&minus, x, label)) / (2.0 * h)
        };

        let hid = model.cell.hidden_dim();
        let din = model.cell.input_dim();
        let k = model.readout.v.rows();

        let mut fd_w = Vec::new();
        for i in 0..hid {
            for j in 0..hid {
                fd_w.push(fd_of(&|m: &mut DeqModel, e: f64| m.cell.w[(i, j)] += e));
            }
        }
        assert!(rel_gap(&fd_w, ift.w.to_rows().concat().as_slice()) < tol, "W gradient");

        let mut fd_u = Vec::new();
        for i in 0..hid {
            for j in 0..din {
                fd_u.push(fd_of(&|m: &mut DeqModel, e: f64| m.cell.u[(i, j)] += e));
            }
        }
        assert!(rel_gap(&fd_u, ift.u.to_rows().concat().as_slice()) < tol, "U gradient");

        let mut fd_b = Vec::new();
        for i in 0..hid {
            fd_b.push(fd_of(&|m: &mut DeqModel, e: f64| m.cell.b[i] += e));
        }
        assert!(rel_gap(&fd_b, ift.b.as_slice()) < tol, "b gradient");

        let mut fd_v = Vec::new();
        for i in 0..k {
            for j in 0..hid {
                fd_v.push(fd_of(&|m: &mut DeqModel, e: f64| m.readout.v[(i, j)] += e));
            }
        }
        assert!(rel_gap(&fd_v, ift.v.to_rows().concat().as_slice()) < tol, "V gradient");

        let mut fd_c = Vec::new();
        for i in 0..k {
            fd_c.push(fd_of(&|m: &mut DeqModel, e: f64| m.readout.c[i] += e));
        }
        assert!(rel_gap(&fd_c, ift.c.as_slice()) < tol, "c gradient");

        // input gradient via perturbing x
        let mut fd_x = Vec::new();
        for j in 0..din {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            fd_x.push((loss_of(model, &xp, label) - loss_of(model, &xm, label)) / (2.0 * h));
        }
        assert!(rel_gap(&fd_x, ift.input.as_slice()) < tol, "input gradient");
    }

    #[test]
    fn ift_gradients_match_finite_differences() {
        let model = DeqModel::init_random(4, 3, 3, 0.9, 0.0, 17).unwrap();
        let x = Vector::new(vec![0.6, -0.3, 0.9]).unwrap();
        fd_check(&model, &x, 1, 1e-4);
    }

    #[test]
    fn zero_coupling_gradients_match_finite_differences() {
        // W = 0 removes the implicit coupling entirely (adjoint u = v)
        let mut model = DeqModel::init_random(4, 2, 2, 0.9, 0.0, 3).unwrap();
        model.cell.w = Matrix::zeros(4, 4);
        let x = Vector::new(vec![0.4, -0.7]).unwrap();
        fd_check(&model, &x, 0, 1e-4);
    }

    #[test]
    fn adjoint_is_linear_in_the_loss_gradient() {
        let model = DeqModel::init_random(5, 2, 2, 0.9, 0.0, 9).unwrap();
        let d = Vector::from_fn(5, |i| 0.3 + 0.1 * i as f64);
        let v = Vector::new(vec![0.5, -1.0, 0.25, 2.0, -0.125]).unwrap();
        let (u1, c1) = adjoint_solve(&model.cell.w, &d, &v, 500, 1e-12);
        let (u2, c2) = adjoint_solve(&model.cell.w, &d, &v.scale(2.0), 500, 1e-12);
        assert!(c1 && c2);
        for i in 0..5 {
            assert!((u2[i] - 2.0 * u1[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        for k in [2usize, 3, 7] {
            let logits = Vector::from_fn(k, |_| 0.7);
            let ce = cross_entropy(&logits, 0).unwrap();
            assert!((ce - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let logits = Vector::new(vec![1000.0, 0.0]).unwrap();
        let ce = cross_entropy(&logits, 0).unwrap();
        assert!(ce.is_finite());
        assert!((0.0..1e-12).contains(&ce));
        // losing side: loss is the logit gap
        let ce_wrong = cross_entropy(&logits, 1).unwrap();
        assert!((ce_wrong - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_reference_values() {
        // reference values from a 50-digit evaluation
        let a = Vector::new(vec![0.3, -1.2, 2.5]).unwrap();
        assert!((cross_entropy(&a, 0).unwrap() - 2.327096582800485843261712).abs() < 1e-14);
        let b = Vector::new(vec![1.7, -0.4, 0.05, 2.2, -3.0]).unwrap();
        assert!((cross_entropy(&b, 3).unwrap() - 0.5893437631736070723080957).abs() < 1e-14);
        assert!(cross_entropy(&a, 3).is_err());
    }

    #[test]
    fn softmax_is_a_distribution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let logits = Vector::from_fn(4, |_| rng.random_range(-30.0..30.0));
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn zero_learning_rate_leaves_the_model_bitwise_unchanged() {
        let model = DeqModel::init_random(6, 2, 2, 0.9, 0.3, 5).unwrap();
        let data = blobs(16, 2, 2, 0.75, 0.25, 2).unwrap();
        let cfg = TrainConfig { lr: 0.0, epochs: 2, sigma: 0.3, seed: 9, ..TrainConfig::default() };
        let (trained, trace) = train(&model, &data, &cfg).unwrap();
        assert_eq!(model_to_json(&trained), model_to_json(&model));
        assert!(!trace.is_empty());
    }

    #[test]
    fn training_is_seed_reproducible() {
        let model = DeqModel::init_random(6, 2, 2, 0.9, 0.3, 5).unwrap();
        let data = blobs(32, 2, 2, 0.75, 0.25, 2).unwrap();
        let cfg = TrainConfig { epochs: 3, sigma: 0.3, seed: 11, batch_size: 8, ..TrainConfig::default() };
        let (m1, t1) = train(&model, &data, &cfg).unwrap();
        let (m2, t2) = train(&model, &data, &cfg).unwrap();
        assert_eq!(model_to_json(&m1), model_to_json(&m2));
        assert_eq!(t1.len(), t2.len());
        for (a, b) in t1.iter().zip(t2.iter()) {
            assert_eq!(a.loss, b.loss);
        }
        let (m3, _) = train(&model, &data, &TrainConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(model_to_json(&m1), model_to_json(&m3));
    }

    #[test]
    fn training_separates_easy_blobs() {
        let model = DeqModel::init_random(8, 2, 2, 0.9, 0.0, 1).unwrap();
        let data = blobs(200, 2, 2, 0.75, 0.25, 33).unwrap();
        let cfg = TrainConfig { epochs: 30, lr: 0.5, sigma: 0.0, seed: 4, ..TrainConfig::default() };
        let (trained, trace) = train(&model, &data, &cfg).unwrap();

        let acc = clean_accuracy(&trained, &data, &cfg.solver).unwrap();
        assert!(acc >= 0.95, "trained accuracy {acc}");

        assert!(trace.iter().all(|r| r.loss.is_finite()));
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
        assert_eq!(trace.len(), cfg.epochs * steps_per_epoch);
        let first: f64 = trace[..steps_per_epoch].iter().map(|r| r.loss).sum::<f64>();
        let last: f64 = trace[trace.len() - steps_per_epoch..].iter().map(|r| r.loss).sum::<f64>();
        assert!(last < first, "loss did not improve: {first} -> {last}");

        // contraction maintained through every rescale
        let norm = spectral_norm_estimate(&trained.cell.w, 200);
        assert!(norm <= 0.9 + 1e-3, "spectral norm {norm}");
    }

    #[test]
    fn divergence_reports_the_step() {
        let mut model = DeqModel::init_random(4, 2, 2, 0.9, 0.0, 2).unwrap();
        // saturate the state positive, then the first logit overflows to
        // +inf and max-subtraction turns inf - inf into NaN
        model.cell.b = Vector::new(vec![5.0; 4]).unwrap();
        model.readout.v = Matrix::from_fn(2, 4, |i, _| if i == 0 { 1e308 } else { -1e308 });
        let data = blobs(8, 2, 2, 0.75, 0.1, 1).unwrap();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        match train(&model, &data, &cfg) {
            Err(Error::TrainingDiverged { step }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { sigma: -0.1, ..ok }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..ok }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..ok }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok }.validate().is_err());
        assert!(TrainConfig { adjoint_tol: 0.0, ..ok }.validate().is_err());
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let model = DeqModel::init_random(4, 3, 2, 0.9, 0.0, 1).unwrap();
        let data = blobs(8, 2, 2, 0.75, 0.1, 1).unwrap();
        assert!(matches!(train(&model, &data, &TrainConfig::default()), Err(Error::Dimension(_))));

        let model2 = DeqModel::init_random(4, 2, 3, 0.9, 0.0, 1).unwrap();
        assert!(matches!(train(&model2, &data, &TrainConfig::default()), Err(Error::Dimension(_))));
    }
}
