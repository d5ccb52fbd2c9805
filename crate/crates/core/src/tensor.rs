//! Dense row-major matrices and the handful of primitives everything else is
//! built from.

use std::fmt;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
///
/// `data.len() == rows * cols` always holds; deserialization rejects payloads
/// that violate it.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix<T>", bound(deserialize = "T: Deserialize<'de>"))]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

#[derive(Deserialize)]
struct RawMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T> TryFrom<RawMatrix<T>> for Matrix<T> {
    type Error = String;

    fn try_from(raw: RawMatrix<T>) -> std::result::Result<Self, String> {
        if raw.data.len() != raw.rows * raw.cols {
            return Err(format!(
                "matrix payload has {} values, expected {}x{}",
                raw.data.len(),
                raw.rows,
                raw.cols
            ));
        }
        Ok(Matrix { rows: raw.rows, cols: raw.cols, data: raw.data })
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            writeln!(f, "  {:?}", &row[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds from nested rows; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", (rows.len(), cols), (1, bad.len())));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    /// 1×n matrix.
    pub fn row_vector(values: Vec<T>) -> Self {
        Matrix { rows: 1, cols: values.len(), data: values }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let n = other.cols;
        let mut out = vec![T::zero(); self.rows * n];
        for (a_row, out_row) in self.data.chunks_exact(self.cols.max(1)).zip(out.chunks_exact_mut(n.max(1))) {
            for (&a, b_row) in a_row.iter().zip(other.data.chunks_exact(n.max(1))) {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix { rows: self.rows, cols: n, data: out })
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.data[i * self.cols + j]);
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data }
    }

    fn zip_with(&self, other: &Matrix<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix<T>) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_row(&self, bias: &Matrix<T>) -> Result<Self> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape("add_row", self.shape(), bias.shape()));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols.max(1)) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Self {
        self.softmax_rows_where(|_, _| true)
    }

    /// Softmax over the entries of each row for which `keep(i, j)` holds;
    /// all other entries are zero. A row with no kept entries is all zeros.
    pub fn softmax_rows_where(&self, keep: impl Fn(usize, usize) -> bool) -> Self {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let src = self.row(i);
            let max = src
                .iter()
                .enumerate()
                .filter(|&(j, _)| keep(i, j))
                .map(|(_, &v)| v)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let dst = out.row_mut(i);
            let mut total = T::zero();
            for (j, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
                if keep(i, j) {
                    *d = (s - max).exp();
                    total += *d;
                }
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        out
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias`. Variance is the biased (population) estimate.
    pub fn layer_norm_rows(&self, gain: &[T], bias: &[T], eps: T) -> Result<Self> {
        if gain.len() != self.cols || bias.len() != self.cols {
            return Err(Error::shape("layer_norm_rows", self.shape(), (gain.len(), bias.len())));
        }
        let n = T::of(self.cols as f64);
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols.max(1)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
                *v = (*v - mean) * rstd * g + b;
            }
        }
        Ok(out)
    }

    pub fn concat_cols(parts: &[&Matrix<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Ok(Matrix::zeros(0, 0));
        };
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape("concat_cols", first.shape(), bad.shape()));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Copy of columns `start..start + width`.
    pub fn col_block(&self, start: usize, width: usize) -> Self {
        Matrix::from_fn(self.rows, width, |i, j| self.get(i, start + j))
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &r in indices {
            if r >= self.rows {
                return Err(Error::shape("gather_rows", self.shape(), (r, 0)));
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(Matrix { rows: indices.len(), cols: self.cols, data })
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Seeded generator with a platform-independent stream (ChaCha8).
///
/// Single owner; clone explicitly to fork a stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.inner.gen_range(lo..=hi)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// `rows × cols` matrix with entries uniform in `[-scale, scale]`.
pub fn seeded_uniform_init<T: Scalar>(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix<T> {
    let scale = scale.abs();
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.uniform(-scale, scale)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        seeded_uniform_init(rows, cols, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
        let col = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let out = m.matmul(&col).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(5, 7, 1);
        let b = random(7, 3, 2);
        let diff = a.matmul(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b));
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = random(2, 3, 0).matmul(&random(2, 3, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Shape { left: (2, 3), right: (2, 3), .. }));
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![2f64.ln(), 0.0], vec![1000.0, 0.0]]).unwrap();
        let s = m.softmax_rows();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.get(2, 0), 1.0);
        assert!(s.get(2, 1) >= 0.0 && s.get(2, 1) < 1e-300);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_where_empty_row_is_zero() {
        let m = random(3, 3, 4);
        let s = m.softmax_rows_where(|i, j| i != 0 && j <= i);
        assert!(s.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(s.get(1, 2), 0.0);
        assert!((s.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let c = Matrix::from_rows(&[vec![3.0, 3.0, 3.0]]).unwrap();
        let out = c.layer_norm_rows(&[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let r: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let out = r.layer_norm_rows(&[1.0; 2], &[0.0; 2], 1e-14).unwrap();
        assert!((out.get(0, 0) + 1.0).abs() < 1e-12);
        assert!((out.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let m = random(1, 9, 11);
        let gain: Vec<f64> = (0..9).map(|i| 0.5 + i as f64 * 0.1).collect();
        let bias: Vec<f64> = (0..9).map(|i| i as f64 * -0.05).collect();
        let out = m.layer_norm_rows(&gain, &bias, 1e-5).unwrap();
        let x = m.row(0);
        let mean = x.iter().sum::<f64>() / 9.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        for j in 0..9 {
            let expect = (x[j] - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j];
            assert!((out.get(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rejects_bad_gain() {
        assert!(random(2, 3, 0).layer_norm_rows(&[1.0; 2], &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn uniform_init_properties() {
        let z: Matrix<f64> = seeded_uniform_init(3, 4, 0.0, &mut Rng::new(3));
        assert!(z.data().iter().all(|&v| v == 0.0));

        let a: Matrix<f64> = seeded_uniform_init(6, 5, 0.3, &mut Rng::new(9));
        let b: Matrix<f64> = seeded_uniform_init(6, 5, 0.3, &mut Rng::new(9));
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 0.3));

        let mut rng = Rng::new(5);
        let first: Matrix<f64> = seeded_uniform_init(2, 2, 1.0, &mut rng);
        let second: Matrix<f64> = seeded_uniform_init(2, 2, 1.0, &mut rng);
        assert_ne!(first.data(), second.data());

        let big: Matrix<f64> = seeded_uniform_init(100, 100, 2.0, &mut Rng::new(17));
        let mean = big.sum() / 1e4;
        assert!(mean.abs() < 0.02 * 2.0, "{mean}");
    }

    #[test]
    fn f32_forward_primitives() {
        let m: Matrix<f32> = seeded_uniform_init(4, 6, 1.0, &mut Rng::new(2));
        let s = m.softmax_rows();
        for i in 0..4 {
            assert!((s.row(i).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let p = m.matmul(&m.transpose()).unwrap();
        assert_eq!(p.shape(), (4, 4));
    }

    #[test]
    fn deserialize_rejects_bad_length() {
        let bad = r#"{"rows":2,"cols":2,"data":[1.0,2.0,3.0]}"#;
        assert!(serde_json::from_str::<Matrix<f64>>(bad).is_err());
        let good = r#"{"rows":1,"cols":2,"data":[1.0,2.0]}"#;
        assert_eq!(serde_json::from_str::<Matrix<f64>>(good).unwrap().shape(), (1, 2));
    }

    fn matrix_strategy(max: usize) -> impl Strategy<Value = Matrix<f64>> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in matrix_strategy(12)) {
            let s = m.softmax_rows();
            for i in 0..s.rows() {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn matmul_agrees_with_oracle(n in 1usize..=32, k in 1usize..=32, m in 1usize..=32, seed in 0u64..1000) {
            let a = random(n, k, seed);
            let b = random(k, m, seed + 1);
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }

        #[test]
        fn layer_norm_shift_invariant(m in matrix_strategy(10), shifts in proptest::collection::vec(-100.0f64..100.0, 10)) {
            let gain = vec![1.3; m.cols()];
            let bias = vec![-0.2; m.cols()];
            let shifted = Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + shifts[i]);
            let a = m.layer_norm_rows(&gain, &bias, 1e-5).unwrap();
            let b = shifted.layer_norm_rows(&gain, &bias, 1e-5).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-9);
        }
    }
}
