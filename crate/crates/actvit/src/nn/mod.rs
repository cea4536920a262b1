//! Minimal dense NN kernels with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the same model code runs in f32
//! for training and f64 for finite-difference gradient checks. All kernels
//! are single-threaded with fixed accumulation order: identical inputs give
//! bit-identical outputs on every run, which the reproducibility guarantees
//! of the trainer lean on.

pub mod encoder;
pub mod optim;

use rand_chacha::ChaCha8Rng;

use crate::rng::standard_normal;

/// Scalar type for model arithmetic.
pub trait Real:
    Copy
    + Clone
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln_1p(self) -> Self {
        self.ln_1p()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln_1p(self) -> Self {
        self.ln_1p()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<R: Real> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> Mat<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![R::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: R) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Mat<R>) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// C = A B with A (m,k) and B (k,n).
    pub fn matmul(&self, b: &Mat<R>) -> Mat<R> {
        assert_eq!(self.cols, b.rows, "matmul inner dim mismatch");
        let mut out = Mat::zeros(self.rows, b.cols);
        matmul_nn(
            &self.data, self.rows, self.cols, &b.data, b.cols, &mut out.data,
        );
        out
    }

    /// C = A B^T with A (m,k) and B (n,k).
    pub fn matmul_nt(&self, b: &Mat<R>) -> Mat<R> {
        assert_eq!(self.cols, b.cols, "matmul_nt inner dim mismatch");
        let mut out = Mat::zeros(self.rows, b.rows);
        matmul_nt(
            &self.data, self.rows, self.cols, &b.data, b.rows, &mut out.data,
        );
        out
    }

    /// C = A^T B with A (m,k) and B (m,n): the gradient-of-weights product.
    pub fn matmul_tn(&self, b: &Mat<R>) -> Mat<R> {
        assert_eq!(self.rows, b.rows, "matmul_tn outer dim mismatch");
        let mut out = Mat::zeros(self.cols, b.cols);
        matmul_tn(
            &self.data, self.rows, self.cols, &b.data, b.cols, &mut out.data,
        );
        out
    }

    pub fn transpose(&self) -> Mat<R> {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.to_f32()).collect()
    }
}

/// out[m,n] += a[m,k] * b[k,n]; i-k-j loop order keeps the inner loop
/// contiguous in both b and out so it autovectorizes.
pub fn matmul_nn<R: Real>(a: &[R], m: usize, k: usize, b: &[R], n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T; row-dot-row form. Four accumulator lanes
/// keep the dot product vectorizable; the lane layout is fixed, so results
/// are identical on every run.
pub fn matmul_nt<R: Real>(a: &[R], m: usize, k: usize, b: &[R], n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let chunks = k / 4;
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut lanes = [R::ZERO; 4];
            for c in 0..chunks {
                let p = 4 * c;
                lanes[0] += a_row[p] * b_row[p];
                lanes[1] += a_row[p + 1] * b_row[p + 1];
                lanes[2] += a_row[p + 2] * b_row[p + 2];
                lanes[3] += a_row[p + 3] * b_row[p + 3];
            }
            let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
            for p in 4 * chunks..k {
                acc += a_row[p] * b_row[p];
            }
            out_row[j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]; rank-1 accumulation per input row.
pub fn matmul_tn<R: Real>(a: &[R], m: usize, k: usize, b: &[R], n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (p, &a_rp) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_rp * b_row[j];
            }
        }
    }
}

/// In-place numerically stable row softmax.
pub fn softmax_rows<R: Real>(x: &mut [R], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    for i in 0..rows {
        let row = &mut x[i * cols..(i + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            max = max.maximum(v);
        }
        let mut sum = R::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Row-wise softmax backward: dz = p * (dp - sum(p * dp)).
pub fn softmax_backward_rows<R: Real>(p: &[R], dp: &[R], rows: usize, cols: usize, dz: &mut [R]) {
    for i in 0..rows {
        let pr = &p[i * cols..(i + 1) * cols];
        let dpr = &dp[i * cols..(i + 1) * cols];
        let mut dot = R::ZERO;
        for j in 0..cols {
            dot += pr[j] * dpr[j];
        }
        let dzr = &mut dz[i * cols..(i + 1) * cols];
        for j in 0..cols {
            dzr[j] = pr[j] * (dpr[j] - dot);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (R::ONE + inner.tanh())
}

pub fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let three = R::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (R::ONE + t) + half * x * (R::ONE - t * t) * c * (R::ONE + three * a * x * x)
}

/// Stable sigmoid.
pub fn sigmoid<R: Real>(z: R) -> R {
    if z >= R::ZERO {
        R::ONE / (R::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (R::ONE + e)
    }
}

/// Binary cross-entropy with logits for one sample:
/// max(z, 0) - z*y + ln(1 + exp(-|z|)).
pub fn bce_with_logit<R: Real>(z: R, y: R) -> R {
    z.maximum(R::ZERO) - z * y + (-z.abs()).exp().ln_1p()
}

/// d/dz of [`bce_with_logit`]: sigmoid(z) - y.
pub fn bce_with_logit_grad<R: Real>(z: R, y: R) -> R {
    sigmoid(z) - y
}

/// A parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<R: Real> {
    pub value: Mat<R>,
    pub grad: Mat<R>,
}

impl<R: Real> Param<R> {
    pub fn new(value: Mat<R>) -> Self {
        let grad = Mat::zeros(value.rows, value.cols);
        Param { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Mat::zeros(rows, cols))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(R::ZERO);
    }
}

/// Truncated normal init (std `std`, resampled beyond 2 std), the usual ViT
/// weight init.
pub fn trunc_normal<R: Real>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat<R> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let mut v = standard_normal(rng);
        while v.abs() > 2.0 {
            v = standard_normal(rng);
        }
        data.push(R::from_f64(v * std));
    }
    Mat::from_vec(rows, cols, data)
}

/// Inverted-dropout mask: entries are 0 with probability `p`, else 1/(1-p).
pub fn dropout_mask<R: Real>(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<R> {
    use rand::Rng;
    debug_assert!((0.0..1.0).contains(&p));
    let keep = R::from_f64(1.0 / (1.0 - p));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < p {
                R::ZERO
            } else {
                keep
            }
        })
        .collect()
}
