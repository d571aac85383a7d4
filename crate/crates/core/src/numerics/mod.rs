//! Dense linear algebra and calculus helpers.
//!
//! Storage is 32-bit; every reduction accumulates in 64-bit. The model's
//! hot loops use the slice kernels in [`kernels`] directly instead of going
//! through [`Matrix`].

pub(crate) mod kernels;
mod svd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use svd::{pinv, pinv_default, singular_values};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "Matrix::from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for
    /// keeping entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f32) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f32> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "max_abs_diff",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Standard matrix product with 64-bit accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut acc = vec![0.0f64; b.cols];
    let mut data = Vec::with_capacity(a.rows * b.cols);
    for r in 0..a.rows {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..a.cols {
            let scale = f64::from(a.data[r * a.cols + k]);
            kernels::axpy_f32(scale, b.row(k), &mut acc);
        }
        data.extend(acc.iter().map(|&x| x as f32));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("matmul"));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data,
    })
}

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense `f32` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f32>,
}

impl Vector {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Vector::new"));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    /// Narrowing conversion from a 64-bit buffer.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&x| x as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        if self.dim() != other.dim() {
            return Err(Error::Shape {
                op: "Vector::sub",
                left: (1, self.dim()),
                right: (1, other.dim()),
            });
        }
        Ok(Vector {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }
}

impl From<Vector> for Vec<f32> {
    fn from(v: Vector) -> Self {
        v.data
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction helpers
// ---------------------------------------------------------------------------

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Numerically stable softmax (max subtraction, 64-bit sums).
pub fn softmax(v: &Vector) -> Vector {
    let wide: Vec<f64> = v.data.iter().map(|&x| f64::from(x)).collect();
    Vector {
        data: softmax_f64(&wide).into_iter().map(|x| x as f32).collect(),
    }
}

pub fn softmax_f64(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// Divide by the L2 norm. A zero vector has no direction and is reported
/// as a degenerate steer.
pub fn l2_normalize(v: &Vector) -> Result<Vector> {
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateSteer(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Ok(Vector {
        data: v.data.iter().map(|&x| (f64::from(x) / norm) as f32).collect(),
    })
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> Result<usize> {
    argmax_by(v, |a, b| a > b)
}

pub fn argmax_f64(v: &[f64]) -> Result<usize> {
    argmax_by(v, |a, b| a > b)
}

fn argmax_by<T: Copy>(v: &[T], greater: impl Fn(T, T) -> bool) -> Result<usize> {
    let (first, rest) = v.split_first().ok_or(Error::Empty("argmax"))?;
    let mut best = 0;
    let mut best_val = *first;
    for (i, &x) in rest.iter().enumerate() {
        if greater(x, best_val) {
            best = i + 1;
            best_val = x;
        }
    }
    Ok(best)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization of one vector, `gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layer_norm(x: &Vector, gain: &Vector, bias: &Vector) -> Result<Vector> {
    if x.dim() != gain.dim() || x.dim() != bias.dim() {
        return Err(Error::Shape {
            op: "layer_norm",
            left: (1, x.dim()),
            right: (1, gain.dim()),
        });
    }
    let wide: Vec<f64> = x.data.iter().map(|&v| f64::from(v)).collect();
    let mut out = vec![0.0; x.dim()];
    let mut xhat = vec![0.0; x.dim()];
    kernels::layer_norm_row(&wide, &gain.data, &bias.data, &mut xhat, &mut out);
    Vector::from_f64(&out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i * b.cols() + j] += f64::from(a.get(i, k)) * f64::from(b.get(k, j));
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Matrix::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 5, 7);
        let b = random_matrix(&mut rng, 7, 3);
        let got = a.matmul(&b).unwrap();
        for (g, want) in got.as_slice().iter().zip(naive_matmul(&a, &b)) {
            assert!((f64::from(*g) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_cases() {
        let half = softmax(&Vector::new(vec![0.0, 0.0]).unwrap());
        assert_eq!(half.as_slice(), &[0.5, 0.5]);

        let big = softmax(&Vector::new(vec![1000.0, 0.0]).unwrap());
        assert!((big.as_slice()[0] - 1.0).abs() < 1e-6);
        assert!(big.as_slice()[1].abs() < 1e-6);

        let got = softmax(&Vector::new(vec![1.0, 2.0, 3.0]).unwrap());
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let total: f64 = exps.iter().sum();
        for (g, e) in got.as_slice().iter().zip(exps) {
            assert!((f64::from(*g) - e / total).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let v = l2_normalize(&Vector::new(vec![3.0, 4.0]).unwrap()).unwrap();
        assert!((v.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((v.as_slice()[1] - 0.8).abs() < 1e-7);
        let again = l2_normalize(&v).unwrap();
        assert_eq!(again, v);
        let err = l2_normalize(&Vector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::DegenerateSteer(_)));
    }

    #[test]
    fn argmax_cases() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]).unwrap(), 1);
        assert_eq!(argmax(&[0.5, 0.5]).unwrap(), 0);
        assert!(matches!(argmax(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let x = Vector::new(vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let ones = Vector::new(vec![1.0; 4]).unwrap();
        let y = layer_norm(&x, &ones, &Vector::zeros(4)).unwrap();
        let mean: f64 = y.as_slice().iter().map(|&v| f64::from(v)).sum::<f64>() / 4.0;
        let var: f64 = y
            .as_slice()
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, n in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, m, n);
            let b = random_matrix(&mut rng, n, p);
            let c = random_matrix(&mut rng, p, q);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-4);
        }

        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-1e4f32..1e4, 1..40)) {
            let p = softmax(&Vector::new(v).unwrap());
            prop_assert!(p.as_slice().iter().all(|&x| x >= 0.0));
            let total: f64 = p.as_slice().iter().map(|&x| f64::from(x)).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }

        #[test]
        fn argmax_matches_linear_scan(v in proptest::collection::vec(-100f32..100.0, 1..64)) {
            let mut best = 0;
            for i in 0..v.len() {
                if v[i] > v[best] {
                    best = i;
                }
            }
            prop_assert_eq!(argmax(&v).unwrap(), best);
        }

        #[test]
        fn argmax_shift_invariant(v in proptest::collection::vec(-100i32..100, 1..64), shift in -50i32..50) {
            // integer-valued entries keep the shift exact in f32
            let base: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            let shifted: Vec<f32> = v.iter().map(|&x| (x + shift) as f32).collect();
            prop_assert_eq!(argmax(&base).unwrap(), argmax(&shifted).unwrap());
        }
    }
}
