//! Synthetic point-cloud datasets and their on-disk JSON format.
//!
//! Desk-scale stand-ins for image data: low-dimensional clouds where
//! analytic decision boundaries and brute-force checks stay feasible.
//! Generators are deterministic in the seed, class-balanced (class counts
//! differ by at most one), and emit points in label round-robin order.

use crate::error::{Error, Result};
use crate::linalg::Vector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Vec<Vector>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vector>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Argument("dataset must contain at least one point".into()));
        }
        if inputs.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} inputs vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Argument("num_classes must be >= 2".into()));
        }
        let dim = inputs[0].len();
        if dim == 0 {
            return Err(Error::Argument("points must have dimension >= 1".into()));
        }
        if let Some(bad) = inputs.iter().position(|x| x.len() != dim) {
            return Err(Error::Dimension(format!(
                "point {bad} has dimension {} but point 0 has {dim}",
                inputs[bad].len()
            )));
        }
        if let Some(bad) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::Argument(format!(
                "label {} at index {bad} out of range for {num_classes} classes",
                labels[bad]
            )));
        }
        Ok(Dataset { inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty datasets
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input(&self, i: usize) -> &Vector {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn inputs(&self) -> &[Vector] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// First `n` points, for quick smoke runs over a prefix of a file.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len()).max(1);
        Dataset {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    version: u32,
    dim: usize,
    num_classes: usize,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

pub fn dataset_to_json(data: &Dataset) -> String {
    let file = DatasetFile {
        version: DATASET_VERSION,
        dim: data.dim(),
        num_classes: data.num_classes,
        inputs: data.inputs.iter().map(|x| x.to_vec()).collect(),
        labels: data.labels.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("dataset serialization");
    s.push('\n');
    s
}

pub fn dataset_from_json(text: &str) -> Result<Dataset> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == DATASET_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Format(format!(
                "dataset version {v} not supported (expected {DATASET_VERSION})"
            )))
        }
        None => return Err(Error::Format("dataset file missing version field".into())),
    }
    let file: DatasetFile = serde_json::from_value(value)?;
    let inputs = file
        .inputs
        .into_iter()
        .map(Vector::new)
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::new(inputs, file.labels, file.num_classes)?;
    if data.dim() != file.dim {
        return Err(Error::Format(format!(
            "declared dim {} but points have dimension {}",
            file.dim,
            data.dim()
        )));
    }
    Ok(data)
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_json(data))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    dataset_from_json(&text)
}

fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    // Box-Muller on open-interval uniforms
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    gaussian_pair(rng).0
}

fn check_counts(n_points: usize, num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::Argument("need at least 2 classes".into()));
    }
    if n_points < 2 * num_classes {
        return Err(Error::Argument(format!(
            "need at least {} points for {num_classes} classes, got {n_points}",
            2 * num_classes
        )));
    }
    Ok(())
}

fn check_noise(noise: f64) -> Result<()> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Argument(format!("noise must be >= 0, got {noise}")));
    }
    Ok(())
}

/// Isotropic Gaussian blobs with centers on the coordinate axes: class k
/// sits at distance `center_dist` from the origin along axis k/2, on the
/// positive side for even k and the negative side for odd k. Two classes in
/// any dimension are therefore `2*center_dist` apart.
pub fn blobs(
    n_points: usize,
    dim: usize,
    num_classes: usize,
    center_dist: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    check_counts(n_points, num_classes)?;
    check_noise(noise)?;
    if dim == 0 {
        return Err(Error::Argument("dim must be >= 1".into()));
    }
    if num_classes > 2 * dim {
        return Err(Error::Argument(format!(
            "{num_classes} classes need dimension >= {}, got {dim}",
            num_classes.div_ceil(2)
        )));
    }
    if !(center_dist > 0.0 && center_dist.is_finite()) {
        return Err(Error::Argument(format!("center_dist must be > 0, got {center_dist}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let class = i % num_classes;
        let axis = class / 2;
        let sign = if class % 2 == 0 { 1.0 } else { -1.0 };
        let mut point = vec![0.0; dim];
        point[axis] = sign * center_dist;
        for coord in point.iter_mut() {
            *coord += noise * gaussian(&mut rng);
        }
        inputs.push(Vector::new(point)?);
        labels.push(class);
    }
    Dataset::new(inputs, labels, num_classes)
}

/// Two interleaved half-circles: class 0 on the upper unit half-circle
/// centered at the origin, class 1 on the lower half-circle centered at
/// (1, 0.5). With noise 0 every point lies exactly on its circle.
pub fn two_moons(n_points: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_counts(n_points, 2)?;
    check_noise(noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let class = i % 2;
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (mut x, mut y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let (gx, gy) = gaussian_pair(&mut rng);
        x += noise * gx;
        y += noise * gy;
        inputs.push(Vector::new(vec![x, y])?);
        labels.push(class);
    }
    Dataset::new(inputs, labels, 2)
}

/// Concentric circles: class c at radius 1 + c, uniform in angle.
pub fn rings(n_points: usize, num_classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_counts(n_points, num_classes)?;
    check_noise(noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let class = i % num_classes;
        let radius = 1.0 + class as f64;
        let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
        let (gx, gy) = gaussian_pair(&mut rng);
        let x = radius * theta.cos() + noise * gx;
        let y = radius * theta.sin() + noise * gy;
        inputs.push(Vector::new(vec![x, y])?);
        labels.push(class);
    }
    Dataset::new(inputs, labels, num_classes)
}
