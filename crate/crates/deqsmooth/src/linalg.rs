//! Dense vectors and matrices, sized for desk-scale models (dims in the
//! tens, not thousands). f64 throughout. Constructors reject non-finite
//! entries; computed results are trusted and checked by callers that iterate.

use crate::error::{Error, Result};
use std::ops::{Index, IndexMut};

#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Validating constructor: every entry must be finite.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "vector entry {i} is not finite: {}",
                data[i]
            )));
        }
        Ok(Vector(data))
    }

    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize) -> f64) -> Self {
        Vector((0..n).map(f).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.clone()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot of mismatched lengths");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "add of mismatched lengths");
        Vector::from_fn(self.len(), |i| self.0[i] + other.0[i])
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "sub of mismatched lengths");
        Vector::from_fn(self.len(), |i| self.0[i] - other.0[i])
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector::from_fn(self.len(), |i| self.0[i] * s)
    }

    /// self += s * other
    pub fn axpy(&mut self, s: f64, other: &Vector) {
        assert_eq!(self.len(), other.len(), "axpy of mismatched lengths");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Validating constructor: data length must equal rows*cols and every
    /// entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "matrix entry {i} is not finite: {}",
                data[i]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds from nested row arrays, as found in the JSON file formats.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dimension("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows in matrix".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!(
                "matvec: {}x{} matrix with length-{} vector",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(Vector::from_fn(self.rows, |i| {
            self.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum()
        }))
    }

    /// Applies the transpose without materializing it (adjoint passes).
    pub fn matvec_t(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.rows {
            return Err(Error::Dimension(format!(
                "matvec_t: {}x{} matrix with length-{} vector",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        Ok(Vector(out))
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// self += s * other
    pub fn add_scaled_in_place(&mut self, s: f64, other: &Matrix) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "add_scaled of mismatched shapes"
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn l2_norm(v: &Vector) -> f64 {
    v.norm()
}

/// Largest singular value of `m`, estimated by power iteration on M^T M.
///
/// The estimate is the Rayleigh quotient sqrt(v^T M^T M v) for the current
/// unit iterate v, which is nondecreasing in the iteration count and
/// approaches the true value from below. The start vector is deterministic
/// (ones with a small index-dependent tilt so symmetric matrices cannot trap
/// the iterate on a lower singular subspace).
pub fn spectral_norm_estimate(m: &Matrix, iters: usize) -> f64 {
    let n = m.cols();
    if n == 0 || m.rows() == 0 {
        return 0.0;
    }
    let mut v = Vector::from_fn(n, |i| 1.0 + 1e-3 * i as f64);
    let nv = v.norm();
    v = v.scale(1.0 / nv);
    let mut est = 0.0;
    for _ in 0..iters {
        let mv = m.matvec(&v).expect("shape fixed by construction");
        est = mv.norm();
        if est == 0.0 {
            return 0.0;
        }
        let mut w = m.matvec_t(&mv).expect("shape fixed by construction");
        let nw = w.norm();
        if nw == 0.0 {
            return est;
        }
        w = w.scale(1.0 / nw);
        v = w;
    }
    est
}

/// Solves a x = b by Gaussian elimination with partial pivoting.
/// A pivot below 1e-12 in magnitude reports the system as singular.
pub fn dense_solve(a: &Matrix, b: &Vector) -> Result<Vector> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dimension(format!(
            "dense_solve needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.len() != n {
        return Err(Error::Dimension(format!(
            "dense_solve: {n}x{n} matrix with length-{} rhs",
            b.len()
        )));
    }

    const PIVOT_MIN: f64 = 1e-12;
    let mut aug = a.clone();
    let mut rhs = b.to_vec();

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| {
                aug[(r, col)]
                    .abs()
                    .partial_cmp(&aug[(s, col)].abs())
                    .expect("finite entries")
            })
            .expect("non-empty range");
        if aug[(pivot_row, col)].abs() < PIVOT_MIN {
            return Err(Error::Singular(format!(
                "pivot {:.3e} below threshold in column {col}",
                aug[(pivot_row, col)]
            )));
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = aug[(col, j)];
                aug[(col, j)] = aug[(pivot_row, j)];
                aug[(pivot_row, j)] = tmp;
            }
            rhs.swap(col, pivot_row);
        }
        let pivot = aug[(col, col)];
        for r in (col + 1)..n {
            let factor = aug[(r, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                let v = aug[(col, j)];
                aug[(r, j)] -= factor * v;
            }
            rhs[r] -= factor * rhs[col];
        }
    }

    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = rhs[i];
        for j in (i + 1)..n {
            acc -= aug[(i, j)] * x[j];
        }
        x[i] = acc / aug[(i, i)];
    }
    Ok(Vector(x))
}
