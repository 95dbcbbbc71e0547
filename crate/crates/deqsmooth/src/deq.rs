//! The equilibrium cell and classifier head.
//!
//! The cell is a single-layer recurrence f(z, x) = tanh(W z + U x + b). Its
//! hidden state is defined implicitly as the fixed point z* = f(z*, x), which
//! exists and is unique whenever the spectral norm of W stays below 1 (tanh
//! is 1-Lipschitz, so the map contracts at rate ||W||_2). Rescaling W to a
//! target contraction factor gamma is what makes every downstream solver,
//! warm start, and adjoint iteration converge unconditionally.

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm_estimate, Matrix, Vector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Iterations used when estimating a spectral norm for rescaling.
const RESCALE_POWER_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct DeqCellParams {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vector,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutParams {
    pub v: Matrix,
    pub c: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeqModel {
    pub cell: DeqCellParams,
    pub readout: ReadoutParams,
    pub sigma_train: f64,
}

impl DeqCellParams {
    pub fn new(w: Matrix, u: Matrix, b: Vector, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Argument(format!("gamma must be in (0,1), got {gamma}")));
        }
        let h = w.rows();
        if w.cols() != h {
            return Err(Error::Dimension(format!(
                "recurrent weight must be square, got {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        if u.rows() != h || b.len() != h {
            return Err(Error::Dimension(format!(
                "cell shapes disagree: w {h}x{h}, u {}x{}, b {}",
                u.rows(),
                u.cols(),
                b.len()
            )));
        }
        Ok(DeqCellParams { w, u, b, gamma })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.u.cols()
    }
}

/// One application of the cell: tanh(W z + U x + b).
pub fn cell_forward(cell: &DeqCellParams, z: &Vector, x: &Vector) -> Result<Vector> {
    let mut a = cell.w.matvec(z)?;
    let ux = cell.u.matvec(x)?;
    a.axpy(1.0, &ux);
    a.axpy(1.0, &cell.b);
    Ok(Vector::from_fn(a.len(), |i| a[i].tanh()))
}

/// Returns the cell with W scaled by gamma / max(gamma, ||W||_2), so the
/// effective recurrent weight has spectral norm at most gamma. Cells already
/// inside the contraction region come back unchanged; applying the op twice
/// is a fixed point (second pass sees norm <= gamma and scales by 1).
pub fn rescale_to_contraction(cell: &DeqCellParams) -> DeqCellParams {
    let norm = spectral_norm_estimate(&cell.w, RESCALE_POWER_ITERS);
    let scale = cell.gamma / norm.max(cell.gamma);
    let mut w = cell.w.clone();
    w.scale_in_place(scale);
    DeqCellParams {
        w,
        u: cell.u.clone(),
        b: cell.b.clone(),
        gamma: cell.gamma,
    }
}

impl ReadoutParams {
    pub fn new(v: Matrix, c: Vector) -> Result<Self> {
        if v.rows() != c.len() {
            return Err(Error::Dimension(format!(
                "readout shapes disagree: v {}x{}, c {}",
                v.rows(),
                v.cols(),
                c.len()
            )));
        }
        Ok(ReadoutParams { v, c })
    }
}

impl DeqModel {
    pub fn new(cell: DeqCellParams, readout: ReadoutParams, sigma_train: f64) -> Result<Self> {
        if readout.v.cols() != cell.hidden_dim() {
            return Err(Error::Dimension(format!(
                "readout expects hidden dim {}, cell has {}",
                readout.v.cols(),
                cell.hidden_dim()
            )));
        }
        if readout.v.rows() < 1 || cell.hidden_dim() < 1 || cell.input_dim() < 1 {
            return Err(Error::Dimension("all model dims must be >= 1".into()));
        }
        if !(sigma_train >= 0.0 && sigma_train.is_finite()) {
            return Err(Error::Argument(format!(
                "sigma_train must be finite and >= 0, got {sigma_train}"
            )));
        }
        Ok(DeqModel { cell, readout, sigma_train })
    }

    /// Fresh model with uniform random weights, recurrent part already
    /// rescaled to the contraction region. Deterministic in the seed.
    pub fn init_random(
        hidden_dim: usize,
        input_dim: usize,
        num_classes: usize,
        gamma: f64,
        sigma_train: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ws = 1.0 / (hidden_dim.max(1) as f64).sqrt();
        let us = 1.0 / (input_dim.max(1) as f64).sqrt();
        let w = Matrix::from_fn(hidden_dim, hidden_dim, |_, _| rng.random_range(-ws..ws));
        let u = Matrix::from_fn(hidden_dim, input_dim, |_, _| rng.random_range(-us..us));
        let b = Vector::zeros(hidden_dim);
        let v = Matrix::from_fn(num_classes, hidden_dim, |_, _| rng.random_range(-ws..ws));
        let c = Vector::zeros(num_classes);
        let cell = rescale_to_contraction(&DeqCellParams::new(w, u, b, gamma)?);
        DeqModel::new(cell, ReadoutParams::new(v, c)?, sigma_train)
    }

    pub fn hidden_dim(&self) -> usize {
        self.cell.hidden_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.cell.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.readout.v.rows()
    }
}

/// Readout logits V z + c for a solved hidden state.
pub fn logits(model: &DeqModel, z: &Vector) -> Result<Vector> {
    let mut l = model.readout.v.matvec(z)?;
    l.axpy(1.0, &model.readout.c);
    Ok(l)
}

/// Argmax with ties broken toward the lowest class index.
pub fn classify(logits: &Vector) -> usize {
    assert!(!logits.is_empty(), "classify needs at least one logit");
    let mut best = 0;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    hidden_dim: usize,
    input_dim: usize,
    num_classes: usize,
    gamma: f64,
    sigma_train: f64,
    w: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    b: Vec<f64>,
    v: Vec<Vec<f64>>,
    c: Vec<f64>,
}

pub fn model_to_json(model: &DeqModel) -> String {
    let file = ModelFile {
        version: MODEL_VERSION,
        hidden_dim: model.hidden_dim(),
        input_dim: model.input_dim(),
        num_classes: model.num_classes(),
        gamma: model.cell.gamma,
        sigma_train: model.sigma_train,
        w: model.cell.w.to_rows(),
        u: model.cell.u.to_rows(),
        b: model.cell.b.to_vec(),
        v: model.readout.v.to_rows(),
        c: model.readout.c.to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
    s.push('\n');
    s
}

pub fn model_from_json(text: &str) -> Result<DeqModel> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == MODEL_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Format(format!(
                "unsupported model file version {v} (this build reads version {MODEL_VERSION})"
            )))
        }
        None => return Err(Error::Format("model file is missing a version field".into())),
    }
    let file: ModelFile = serde_json::from_value(value)?;

    let w = Matrix::from_rows(&file.w)?;
    let u = Matrix::from_rows(&file.u)?;
    let b = Vector::new(file.b)?;
    let v = Matrix::from_rows(&file.v)?;
    let c = Vector::new(file.c)?;
    if w.rows() != file.hidden_dim || u.cols() != file.input_dim || v.rows() != file.num_classes {
        return Err(Error::Format(
            "model file dims disagree with its weight shapes".into(),
        ));
    }
    let model = DeqModel::new(
        DeqCellParams::new(w, u, b, file.gamma)?,
        ReadoutParams::new(v, c)?,
        file.sigma_train,
    )?;
    Ok(model)
}

pub fn save_model(model: &DeqModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DeqModel> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::l2_norm;
    use proptest::prelude::*;

    fn small_cell() -> DeqCellParams {
        // W chosen with spectral norm 2 (diagonal), so rescaling is exact
        let w = Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let u = Matrix::new(2, 1, vec![0.5, -0.25]).unwrap();
        let b = Vector::new(vec![0.1, -0.2]).unwrap();
        DeqCellParams::new(w, u, b, 0.9).unwrap()
    }

    #[test]
    fn cell_forward_zero_weights_is_tanh_bias() {
        let cell = DeqCellParams::new(
            Matrix::zeros(3, 3),
            Matrix::zeros(3, 2),
            Vector::new(vec![0.5, -1.0, 0.0]).unwrap(),
            0.9,
        )
        .unwrap();
        let out = cell_forward(&cell, &Vector::zeros(3), &Vector::zeros(2)).unwrap();
        assert!((out[0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((out[1] - (-1.0f64).tanh()).abs() < 1e-15);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn cell_forward_hand_computed() {
        let cell = small_cell();
        let z = Vector::new(vec![0.1, 0.2]).unwrap();
        let x = Vector::new(vec![1.0]).unwrap();
        // a = W z + U x + b = [0.2+0.5+0.1, 0.2-0.25-0.2] = [0.8, -0.25]
        let out = cell_forward(&cell, &z, &x).unwrap();
        assert!((out[0] - 0.8f64.tanh()).abs() < 1e-15);
        assert!((out[1] - (-0.25f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn cell_forward_shape_mismatch() {
        let cell = small_cell();
        assert!(cell_forward(&cell, &Vector::zeros(3), &Vector::zeros(1)).is_err());
        assert!(cell_forward(&cell, &Vector::zeros(2), &Vector::zeros(2)).is_err());
    }

    #[test]
    fn rescale_divides_by_spectral_norm() {
        let cell = small_cell(); // ||W|| = 2, gamma = 0.9
        let scaled = rescale_to_contraction(&cell);
        assert!((scaled.w[(0, 0)] - 2.0 * 0.45).abs() < 1e-9);
        assert!((scaled.w[(1, 1)] - 1.0 * 0.45).abs() < 1e-9);
        // input path and bias untouched
        assert_eq!(scaled.u, cell.u);
        assert_eq!(scaled.b, cell.b);
    }

    #[test]
    fn rescale_is_idempotent() {
        let once = rescale_to_contraction(&small_cell());
        let twice = rescale_to_contraction(&once);
        for i in 0..2 {
            for j in 0..2 {
                assert!((once.w[(i, j)] - twice.w[(i, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rescale_leaves_contractive_cells_alone() {
        let w = Matrix::new(2, 2, vec![0.3, 0.0, 0.0, 0.2]).unwrap();
        let cell = DeqCellParams::new(w.clone(), Matrix::zeros(2, 1), Vector::zeros(2), 0.9).unwrap();
        let scaled = rescale_to_contraction(&cell);
        assert_eq!(scaled.w, w);
    }

    #[test]
    fn rescaled_cell_meets_contraction_bound() {
        let model = DeqModel::init_random(8, 3, 2, 0.9, 0.25, 5).unwrap();
        let norm = spectral_norm_estimate(&model.cell.w, 300);
        assert!(norm <= 0.9 + 1e-3, "spectral norm {norm}");
    }

    #[test]
    fn contraction_property_random_triples() {
        use rand::Rng;
        use rand::SeedableRng;
        let model = DeqModel::init_random(6, 4, 3, 0.85, 0.5, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let z1 = Vector::from_fn(6, |_| rng.random_range(-3.0..3.0));
            let z2 = Vector::from_fn(6, |_| rng.random_range(-3.0..3.0));
            let x = Vector::from_fn(4, |_| rng.random_range(-3.0..3.0));
            let f1 = cell_forward(&model.cell, &z1, &x).unwrap();
            let f2 = cell_forward(&model.cell, &z2, &x).unwrap();
            let lhs = l2_norm(&f1.sub(&f2));
            let rhs = 0.85 * l2_norm(&z1.sub(&z2));
            assert!(lhs <= rhs * (1.0 + 1e-9), "{lhs} > {rhs}");
        }
    }

    #[test]
    fn classify_breaks_ties_low() {
        assert_eq!(classify(&Vector::new(vec![1.0, 1.0, 0.5]).unwrap()), 0);
        assert_eq!(classify(&Vector::new(vec![0.0, 2.0, 2.0]).unwrap()), 1);
        assert_eq!(classify(&Vector::new(vec![-1.0, 0.0, 3.0]).unwrap()), 2);
    }

    #[test]
    fn logits_affine_in_readout() {
        let model = DeqModel::init_random(4, 2, 3, 0.9, 0.0, 1).unwrap();
        let z = Vector::new(vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let l = logits(&model, &z).unwrap();
        let manual = model.readout.v.matvec(&z).unwrap().add(&model.readout.c);
        assert_eq!(l, manual);
    }

    #[test]
    fn gamma_out_of_range_rejected() {
        let w = Matrix::zeros(2, 2);
        let u = Matrix::zeros(2, 1);
        assert!(DeqCellParams::new(w.clone(), u.clone(), Vector::zeros(2), 1.0).is_err());
        assert!(DeqCellParams::new(w, u, Vector::zeros(2), 0.0).is_err());
    }

    #[test]
    fn model_json_round_trip_is_exact() {
        let model = DeqModel::init_random(5, 3, 4, 0.9, 0.25, 42).unwrap();
        let text = model_to_json(&model);
        let back = model_from_json(&text).unwrap();
        assert_eq!(model, back);
        // serialization is deterministic
        assert_eq!(text, model_to_json(&back));
    }

    #[test]
    fn model_json_rejects_unknown_version() {
        let model = DeqModel::init_random(2, 2, 2, 0.9, 0.0, 0).unwrap();
        let text = model_to_json(&model).replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(model_from_json(&text), Err(Error::Format(_))));
    }

    #[test]
    fn model_json_rejects_inconsistent_dims() {
        let model = DeqModel::init_random(2, 2, 2, 0.9, 0.0, 0).unwrap();
        let text = model_to_json(&model).replace("\"hidden_dim\": 2", "\"hidden_dim\": 3");
        assert!(model_from_json(&text).is_err());
    }

    #[test]
    fn model_json_rejects_non_finite() {
        let model = DeqModel::init_random(2, 2, 2, 0.9, 0.0, 0).unwrap();
        let mut file: serde_json::Value = serde_json::from_str(&model_to_json(&model)).unwrap();
        file["b"][0] = serde_json::Value::String("bad".into());
        assert!(model_from_json(&file.to_string()).is_err());
    }

    proptest! {
        #[test]
        fn classify_invariant_under_logit_shift(shift in -5.0f64..5.0, seed in 0u64..100) {
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = Vector::from_fn(4, |_| rng.random_range(-2.0..2.0));
            let shifted = Vector::from_fn(4, |i| l[i] + shift);
            prop_assert_eq!(classify(&l), classify(&shifted));
        }
    }
}
