//! Dense numeric primitives: row-major matrices, scaled logits, row softmax
//! and the reference full attention.
//!
//! Everything here is generic over [`Scalar`] (`f32` or `f64`). Matrix
//! products go through a blocked GEMM; softmax reductions run left to right
//! along each row so a given precision always reproduces the same bits.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn code(self) -> u8 {
        match self {
            Precision::Single => 0,
            Precision::Double => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Precision::Single),
            1 => Some(Precision::Double),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

/// Floating-point element type of a [`Matrix`].
pub trait Scalar:
    Copy
    + Default
    + Send
    + Sync
    + Debug
    + Display
    + PartialOrd
    + Sum
    + Float
    + std::ops::AddAssign
    + std::ops::MulAssign
    + 'static
{
    const PRECISION: Precision;
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A * B + beta * C` on strided row/column layouts.
    ///
    /// Slices must cover every element addressed by the given strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
    );
}

#[inline]
fn strided_extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $gemm:path) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
            ) {
                assert!(a.len() >= strided_extent(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= strided_extent(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= strided_extent(m, n, rsc, 1), "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every address the kernel
                // touches inside the three slices, and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, Precision::Single, matrixmultiply::sgemm);
impl_scalar!(f64, Precision::Double, matrixmultiply::dgemm);

/// Value standing in for a masked logit; softmax treats it as `-inf`.
#[inline]
pub fn masked<T: Scalar>() -> T {
    T::NEG_INFINITY
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("precision", &T::PRECISION)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    /// Builds a matrix from row-major values, rejecting NaN and infinities.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_len(rows, cols, data.len())?;
        if let Some((index, value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: value.as_f64(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`Matrix::from_vec`] but also accepts the masked sentinel (`-inf`).
    pub fn from_vec_masked(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_len(rows, cols, data.len())?;
        let bad = data
            .iter()
            .enumerate()
            .find(|(_, v)| v.is_nan() || (!v.is_finite() && **v > T::ZERO));
        if let Some((index, value)) = bad {
            return Err(Error::NonFinite {
                index,
                value: value.as_f64(),
            });
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

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::ONE } else { T::ZERO })
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Contiguous slice covering rows `[start, start + count)`.
    #[inline]
    pub fn row_block(&self, start: usize, count: usize) -> &[T] {
        &self.data[start * self.cols..(start + count) * self.cols]
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        T::gemm(
            self.rows,
            self.cols,
            other.cols,
            T::ONE,
            &self.data,
            self.cols,
            1,
            &other.data,
            other.cols,
            1,
            T::ZERO,
            &mut out.data,
            other.cols,
        );
        Ok(out)
    }

    /// `alpha * self * other^T`.
    pub fn matmul_transposed(&self, other: &Matrix<T>, alpha: T) -> Result<Matrix<T>> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "inner dimensions differ: {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        T::gemm(
            self.rows,
            self.cols,
            other.rows,
            alpha,
            &self.data,
            self.cols,
            1,
            &other.data,
            1,
            other.cols,
            T::ZERO,
            &mut out.data,
            other.rows,
        );
        Ok(out)
    }

    /// Frobenius norm, accumulated in `f64`.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Largest elementwise absolute difference, evaluated in `f64`.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "compare {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Matrix<T>> {
        if start + width > self.cols {
            return Err(Error::Shape(format!(
                "column block {start}..{} of {} columns",
                start + width,
                self.cols
            )));
        }
        Ok(Self::from_fn(self.rows, width, |r, c| self.get(r, start + c)))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(parts: &[Matrix<T>]) -> Result<Matrix<T>> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::Shape("hstack row counts differ".into()));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }
}

fn check_len(rows: usize, cols: usize, len: usize) -> Result<()> {
    if rows.checked_mul(cols) != Some(len) {
        return Err(Error::Shape(format!(
            "{len} values do not fill a {rows}x{cols} matrix"
        )));
    }
    Ok(())
}

/// Multiplier applied to query-key inner products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttnScale {
    scale: f64,
    head_dim: usize,
}

impl AttnScale {
    /// The attention default `1/sqrt(d)`.
    pub fn for_head_dim(head_dim: usize) -> Self {
        Self {
            scale: 1.0 / (head_dim.max(1) as f64).sqrt(),
            head_dim,
        }
    }

    /// Unscaled inner products, used for the logit-space error analysis.
    pub fn unit(head_dim: usize) -> Self {
        Self {
            scale: 1.0,
            head_dim,
        }
    }

    pub fn new(scale: f64, head_dim: usize) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Scale(scale));
        }
        Ok(Self { scale, head_dim })
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.scale
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }
}

/// `S[u][v] = scale * <Q_u, K_v>`.
pub fn logits<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, scale: AttnScale) -> Result<Matrix<T>> {
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "Q has {} columns, K has {}",
            q.cols(),
            k.cols()
        )));
    }
    q.matmul_transposed(k, T::from_f64(scale.value()))
}

/// In-place stable softmax of one row. Rows whose entries are all masked
/// become all zeros.
#[inline]
pub fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::NEG_INFINITY, |m, &x| m.max(x));
    if !max.is_finite() {
        row.iter_mut().for_each(|x| *x = T::ZERO);
        return;
    }
    let mut sum = T::ZERO;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Numerically stable softmax applied to every row.
pub fn softmax_rows<T: Scalar>(s: &Matrix<T>) -> Matrix<T> {
    let mut out = s.clone();
    let cols = out.cols();
    if cols > 0 {
        out.as_mut_slice()
            .chunks_mut(cols)
            .for_each(softmax_row_in_place);
    }
    out
}

/// Query rows evaluated per chunk by [`full_attention`].
const FULL_ATTENTION_CHUNK: usize = 128;

/// `softmax_rows(logits(Q, K, scale)) * V`.
///
/// Rows are processed in chunks so the full `n x n` score matrix is never
/// resident at once; each row sees exactly the same arithmetic as the
/// unchunked formula.
pub fn full_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    scale: AttnScale,
) -> Result<Matrix<T>> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (n_q, n_k, d_v) = (q.rows(), k.rows(), v.cols());
    let mut out = Matrix::zeros(n_q, d_v);
    if n_q == 0 || d_v == 0 {
        return Ok(out);
    }
    let alpha = T::from_f64(scale.value());
    out.as_mut_slice()
        .par_chunks_mut(FULL_ATTENTION_CHUNK * d_v)
        .enumerate()
        .for_each(|(chunk, out_rows)| {
            let start = chunk * FULL_ATTENTION_CHUNK;
            let m = out_rows.len() / d_v;
            let mut scores = vec![T::ZERO; m * n_k];
            T::gemm(
                m,
                q.cols(),
                n_k,
                alpha,
                q.row_block(start, m),
                q.cols(),
                1,
                k.as_slice(),
                1,
                k.cols(),
                T::ZERO,
                &mut scores,
                n_k,
            );
            if n_k > 0 {
                scores.chunks_mut(n_k).for_each(softmax_row_in_place);
            }
            T::gemm(
                m,
                n_k,
                d_v,
                T::ONE,
                &scores,
                n_k,
                1,
                v.as_slice(),
                d_v,
                1,
                T::ZERO,
                out_rows,
                d_v,
            );
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn logits_of_orthonormal_rows_is_identity() {
        let q = Matrix::<f32>::identity(2);
        let s = logits(&q, &q, AttnScale::unit(2)).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn logits_of_zero_queries_is_zero() {
        let q = Matrix::<f64>::zeros(3, 4);
        let k = random(5, 4, 1);
        let s = logits(&q, &k, AttnScale::for_head_dim(4)).unwrap();
        assert_eq!(s.shape(), (3, 5));
        assert!(s.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn logits_rejects_mismatched_head_dims() {
        let q = Matrix::<f64>::zeros(3, 4);
        let k = Matrix::<f64>::zeros(3, 5);
        assert!(matches!(
            logits(&q, &k, AttnScale::unit(4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn logits_match_triple_loop() {
        let q = random(8, 4, 2).cast::<f32>();
        let k = random(8, 4, 3).cast::<f32>();
        let scale = AttnScale::new(0.7, 4).unwrap();
        let s = logits(&q, &k, scale).unwrap();
        for u in 0..8 {
            for v in 0..8 {
                let mut acc = 0.0f64;
                for c in 0..4 {
                    acc += q.get(u, c) as f64 * k.get(v, c) as f64;
                }
                assert!((s.get(u, v) as f64 - 0.7 * acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_single_survivor() {
        let s = Matrix::<f64>::from_vec_masked(
            2,
            3,
            vec![5.0, 5.0, 5.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
        )
        .unwrap();
        let p = softmax_rows(&s);
        for &x in p.row(0) {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(p.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let s = Matrix::<f32>::from_vec_masked(1, 2, vec![masked(), masked()]).unwrap();
        assert_eq!(softmax_rows(&s).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // e^1, e^2, e^3 normalised; reference values evaluated with 30-digit arithmetic.
        let expected = [
            0.090_030_573_170_380_458_f64,
            0.244_728_471_054_797_65,
            0.665_240_955_774_821_9,
        ];
        let s = Matrix::<f64>::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = softmax_rows(&s);
        for (a, b) in p.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            Matrix::<f32>::from_vec(1, 2, vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(Matrix::<f32>::from_vec(1, 1, vec![f32::NEG_INFINITY]).is_err());
        assert!(Matrix::<f32>::from_vec_masked(1, 1, vec![f32::INFINITY]).is_err());
        assert!(Matrix::<f32>::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn attention_of_single_token_is_its_value() {
        let q = random(1, 3, 4);
        let k = random(1, 3, 5);
        let v = random(1, 3, 6);
        let o = full_attention(&q, &k, &v, AttnScale::for_head_dim(3)).unwrap();
        assert!(o.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = random(6, 4, 7);
        let row = random(1, 4, 8);
        let k = Matrix::from_fn(6, 4, |_, c| row.get(0, c));
        let v = random(6, 2, 9);
        let o = full_attention(&q, &k, &v, AttnScale::for_head_dim(4)).unwrap();
        for c in 0..2 {
            let mean = (0..6).map(|r| v.get(r, c)).sum::<f64>() / 6.0;
            for r in 0..6 {
                assert!((o.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scale_must_be_positive() {
        assert!(AttnScale::new(0.0, 4).is_err());
        assert!(AttnScale::new(f64::NAN, 4).is_err());
        assert!((AttnScale::for_head_dim(16).value() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn hstack_and_column_block_invert() {
        let a = random(4, 3, 10);
        let b = random(4, 2, 11);
        let ab = Matrix::hstack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.column_block(0, 3).unwrap(), a);
        assert_eq!(ab.column_block(3, 2).unwrap(), b);
    }
}
