//! Dense row-major matrices used for per-head query/key/value tensors.
//!
//! All reference math runs in `f64`; an `f32` instantiation exists for
//! throughput runs, where callers should expect agreement only to ~1e-3.

use std::fmt;
use std::ops::Range;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};

/// Element type tag used by the binary tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types a [`Matrix`] can hold.
pub trait Real: Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` over strided operands.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// regions, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("f64 literal fits")
    }

    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("finite cast to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Per-head query, key, value or hidden-state rows over the flattened token grid.
pub type HeadTensor<T = f64> = Matrix<T>;

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
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

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CoreError::shape("Matrix::from_rows", "ragged rows"));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Matrix { rows, cols, data }
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
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite(op))
        }
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix { rows: rows.len(), cols: self.cols, data }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(CoreError::shape("Matrix::vstack", "column counts differ"));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows: data.len() / cols.max(1), cols, data })
    }

    fn gemm_into(
        out: &mut Matrix<T>,
        a: &Matrix<T>,
        a_t: bool,
        b: &Matrix<T>,
        b_t: bool,
        alpha: T,
        beta: T,
    ) {
        let (m, k) = if a_t { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let n = if b_t { b.rows } else { b.cols };
        debug_assert_eq!(out.shape(), (m, n));
        let (rsa, csa) = if a_t { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if b_t { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: strides and extents come from the owning matrices and `out`
        // is a distinct allocation of shape m x n.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// `self * other`
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(CoreError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        Self::gemm_into(&mut out, self, false, other, false, T::one(), T::zero());
        Ok(out)
    }

    /// `self * other^T`
    pub fn matmul_t(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.cols {
            return Err(CoreError::shape(
                "matmul_t",
                format!("{:?} x {:?}^T", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        Self::gemm_into(&mut out, self, false, other, true, T::one(), T::zero());
        Ok(out)
    }

    /// `self^T * other`
    pub fn t_matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != other.rows {
            return Err(CoreError::shape(
                "t_matmul",
                format!("{:?}^T x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        Self::gemm_into(&mut out, self, true, other, false, T::one(), T::zero());
        Ok(out)
    }

    /// `self += alpha * a^T * b` (shapes must already agree).
    pub fn add_t_matmul(&mut self, alpha: T, a: &Matrix<T>, b: &Matrix<T>) {
        assert_eq!((a.cols, b.cols), self.shape(), "add_t_matmul shape");
        assert_eq!(a.rows, b.rows, "add_t_matmul inner dim");
        Self::gemm_into(self, a, true, b, false, alpha, T::one());
    }

    /// Writes `self[rows] * other[other_rows]^T` into `out` (row-major with
    /// row stride `other_rows.len()`). Each entry equals the corresponding
    /// entry of [`Matrix::matmul_t`] bit for bit.
    pub fn matmul_t_block(&self, rows: Range<usize>, other: &Matrix<T>, other_rows: Range<usize>, out: &mut [T]) {
        assert_eq!(self.cols, other.cols, "matmul_t_block inner dim");
        assert!(rows.end <= self.rows && other_rows.end <= other.rows, "matmul_t_block range");
        let (m, n) = (rows.len(), other_rows.len());
        assert!(out.len() >= m * n, "matmul_t_block output too small");
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: both ranges were bounds-checked above, `out` holds m x n
        // entries and is distinct from the inputs.
        unsafe {
            T::gemm(
                m,
                self.cols,
                n,
                T::one(),
                self.data.as_ptr().add(rows.start * self.cols),
                self.cols as isize,
                1,
                other.data.as_ptr().add(other_rows.start * other.cols),
                1,
                other.cols as isize,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Matrix<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        if self.shape() != other.shape() {
            return Err(CoreError::shape(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    /// Largest elementwise absolute difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> Option<T> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())),
        )
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    // Four independent lanes, combined in a fixed order.
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn gemm_variants_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::random_normal(7, 5, 1.0, &mut rng);
        let b = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let c = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let expect = naive(&a, &b);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
        let expect_t = naive(&a, &c.transpose());
        assert!(a.matmul_t(&c).unwrap().max_abs_diff(&expect_t).unwrap() < 1e-12);
        let d = Matrix::random_normal(7, 2, 1.0, &mut rng);
        let expect_tm = naive(&a.transpose(), &d);
        assert!(a.t_matmul(&d).unwrap().max_abs_diff(&expect_tm).unwrap() < 1e-12);

        let mut acc = expect_tm.clone();
        acc.add_t_matmul(2.0, &a, &d);
        assert!(acc.max_abs_diff(&expect_tm.scale(3.0)).unwrap() < 1e-12);
    }

    #[test]
    fn block_product_matches_full_product_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::<f64>::random_normal(37, 16, 1.0, &mut rng);
        let b = Matrix::<f64>::random_normal(53, 16, 1.0, &mut rng);
        let full = a.matmul_t(&b).unwrap();
        let mut out = vec![0.0; 9 * 20];
        a.matmul_t_block(5..14, &b, 30..50, &mut out);
        for i in 0..9 {
            for j in 0..20 {
                assert_eq!(out[i * 20 + j].to_bits(), full.get(5 + i, 30 + j).to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(a.matmul(&a).is_err());
        assert!(Matrix::<f64>::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
