//! Dense row-major token matrices and the attention primitives built on them.
//!
//! The reference path runs in `f64`; the same kernels are generic over
//! [`Scalar`] so the packed fast path can also be exercised in `f32`.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type accepted by the kernels.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

/// `rows × cols` matrix of scalars stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Double-precision token matrix: one row per token, one column per channel.
pub type TokenMatrix = Matrix<f64>;

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::Shape("matrix needs at least one column".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks matrices with equal column counts along the token axis.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a Matrix<T>>) -> Result<Self> {
        let mut cols = None;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            match cols {
                None => cols = Some(p.cols),
                Some(c) if c != p.cols => {
                    return Err(Error::Shape(format!("vstack of {c} and {} columns", p.cols)))
                }
                _ => {}
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        let cols = cols.ok_or_else(|| Error::Shape("vstack of nothing".into()))?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Rows picked by index, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(rhs.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// Column-wise mean over tokens (mean pooling), `1 × cols` as a vector.
    pub fn mean_rows(&self) -> Vec<T> {
        let mut acc = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (a, &v) in acc.iter_mut().zip(self.row(r)) {
                *a = *a + v;
            }
        }
        let n = T::of_f64(self.rows.max(1) as f64);
        acc.iter_mut().for_each(|a| *a = *a / n);
        acc
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `softmax(q kᵀ / √d)`, one row per query.
pub fn attention_weights<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>) -> Result<Matrix<T>> {
    if q.cols != k.cols {
        return Err(Error::Shape(format!(
            "query width {} vs key width {}",
            q.cols, k.cols
        )));
    }
    let scale = T::one() / T::of_f64(q.cols as f64).sqrt();
    let mut scores = Matrix::zeros(q.rows, k.rows);
    for i in 0..q.rows {
        let qi = q.row(i);
        for j in 0..k.rows {
            scores.set(i, j, dot(qi, k.row(j)) * scale);
        }
        softmax_in_place(scores.row_mut(i));
    }
    Ok(scores)
}

/// Scaled dot-product attention `softmax(q kᵀ / √d) v`.
pub fn attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    if k.rows != v.rows {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            k.rows, v.rows
        )));
    }
    if k.rows == 0 {
        return Err(Error::Shape("attention over an empty key set".into()));
    }
    let w = attention_weights(q, k)?;
    w.matmul(v)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let num = dot(a, b).as_f64();
    let na = dot(a, a).as_f64().sqrt();
    let nb = dot(b, b).as_f64().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        num / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> TokenMatrix {
        TokenMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn softmax_uniform_row() {
        let m = TokenMatrix::from_vec(1, 3, vec![0.0; 3]).unwrap();
        let s = softmax_rows(&m);
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln3() {
        let m = TokenMatrix::from_vec(1, 2, vec![3f64.ln(), 0.0]).unwrap();
        let s = softmax_rows(&m);
        assert!((s.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let m = TokenMatrix::from_vec(1, 3, vec![1e308, 1e308, -1e308]).unwrap();
        let s = softmax_rows(&m);
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn random_softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = softmax_rows(&random(5, 7, &mut rng));
        for r in 0..5 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(3, 4, &mut rng);
        let k = random(1, 4, &mut rng);
        let v = random(1, 4, &mut rng);
        let out = attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((out.get(r, c) - v.get(0, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn equal_keys_average_the_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(2, 4, &mut rng);
        let row = random(1, 4, &mut rng);
        let k = TokenMatrix::vstack([&row, &row, &row]).unwrap();
        let v = random(3, 4, &mut rng);
        let mean = v.mean_rows();
        let out = attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                assert!((out.get(r, c) - mean[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (random(3, 4, &mut rng), random(5, 4, &mut rng), random(5, 4, &mut rng));
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            let mut s = [0.0f64; 5];
            for j in 0..5 {
                for c in 0..4 {
                    s[j] += q.get(i, c) * k.get(j, c);
                }
                s[j] /= 2.0;
            }
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for c in 0..4 {
                let mut acc = 0.0;
                for j in 0..5 {
                    acc += (s[j] - m).exp() / z * v.get(j, c);
                }
                assert!((out.get(i, c) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_shape_errors() {
        let a = TokenMatrix::zeros(2, 4);
        let b = TokenMatrix::zeros(3, 5);
        assert!(matches!(attention(&a, &b, &b), Err(Error::Shape(_))));
        let c = TokenMatrix::zeros(3, 4);
        let d = TokenMatrix::zeros(2, 4);
        assert!(matches!(attention(&a, &c, &d), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..6,
            cols in 1usize..9,
            seed in any::<u64>(),
            scale in 0.1f64..500.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = TokenMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0) * scale);
            let s = softmax_rows(&m);
            for r in 0..rows {
                prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
