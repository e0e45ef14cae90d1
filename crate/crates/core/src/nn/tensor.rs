use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of the network. `f32` is the production type;
/// `f64` exists for tight gradient checks.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    /// `c = alpha * a * b + beta * c` with arbitrary element strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn lit(x: f64) -> Self;

    /// `exp` as used inside activations; implementations may give up the
    /// last bits for speed.
    #[inline]
    fn exp_act(self) -> Self {
        self.exp()
    }

    /// `tanh` as used inside activations.
    #[inline]
    fn tanh_act(self) -> Self {
        let e = (-(self + self).abs()).exp_m1();
        let t = -e / (Self::lit(2.0) + e);
        if self < Self::zero() {
            -t
        } else {
            t
        }
    }

    /// `y += alpha * x` over the common length.
    #[inline]
    fn axpy(alpha: Self, x: &[Self], y: &mut [Self]) {
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    /// `y += x * B` for a row vector `x` of length `k` and a row-major
    /// `k x n` matrix `B`.
    #[inline]
    fn gemv_acc(x: &[Self], b: &[Self], n: usize, y: &mut [Self]) {
        gemv_generic(x, b, n, y)
    }

    /// `C += A * B` for a short row-major `A` (`m x k`), cycling every row
    /// of `C` through each four-row block of `B` while it sits in cache.
    #[inline]
    fn small_gemm_acc(a: &[Self], k: usize, b: &[Self], n: usize, c: &mut [Self]) {
        small_gemm_generic(a, k, b, n, c)
    }
}

#[inline(always)]
fn small_gemm_generic<F: Copy + std::ops::Add<Output = F> + std::ops::Mul<Output = F> + AddAssign>(
    a: &[F],
    k: usize,
    b: &[F],
    n: usize,
    c: &mut [F],
) {
    for kb in (0..k).step_by(4) {
        let ke = (kb + 4).min(k);
        let block = &b[kb * n..ke * n];
        for (row, out) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
            gemv_generic(&row[kb..ke], block, n, out);
        }
    }
}

/// Four rows of `B` per sweep so each element of `y` is loaded and stored
/// once per four products.
#[inline(always)]
fn gemv_generic<F: Copy + std::ops::Add<Output = F> + std::ops::Mul<Output = F> + AddAssign>(
    x: &[F],
    b: &[F],
    n: usize,
    y: &mut [F],
) {
    let y = &mut y[..n];
    let blocks = x.len() / 4;
    for (xs, bs) in x.chunks_exact(4).zip(b.chunks_exact(4 * n)) {
        let (b0, rest) = bs.split_at(n);
        let (b1, rest) = rest.split_at(n);
        let (b2, b3) = rest.split_at(n);
        let (a0, a1, a2, a3) = (xs[0], xs[1], xs[2], xs[3]);
        for ((((yj, &v0), &v1), &v2), &v3) in y.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
            *yj += a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
        }
    }
    for (kk, &a) in x.iter().enumerate().skip(blocks * 4) {
        for (yj, &v) in y.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
            *yj += a * v;
        }
    }
}

macro_rules! avx2_kernels {
    ($axpy:ident, $gemv:ident, $small:ident, $t:ty) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $axpy(alpha: $t, x: &[$t], y: &mut [$t]) {
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi += alpha * xi;
            }
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $gemv(x: &[$t], b: &[$t], n: usize, y: &mut [$t]) {
            gemv_generic(x, b, n, y)
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $small(a: &[$t], k: usize, b: &[$t], n: usize, c: &mut [$t]) {
            small_gemm_generic(a, k, b, n, c)
        }
    };
}

avx2_kernels!(axpy_f32_avx2, gemv_f32_avx2, small_gemm_f32_avx2, f32);
avx2_kernels!(axpy_f64_avx2, gemv_f64_avx2, small_gemm_f64_avx2, f64);

#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
}

/// Branch-free `exp` for f32: reduction by `ln 2` and a degree-7 polynomial on
/// `[-ln2/2, ln2/2]`. Inputs are clamped to the normal range, so the result
/// is never zero, infinite or subnormal. Relative error stays below 2e-7.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.clamp(-86.0, 88.0);
    // Adding 1.5 * 2^23 rounds to an integer held in the low mantissa bits.
    let t = x * LOG2E + ROUND;
    let n_int = (t.to_bits() as i32).wrapping_sub(0x4B40_0000);
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4_f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits((n_int.wrapping_add(127) as u32) << 23)
}

impl Real for f32 {
    unsafe fn gemm_raw(
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

    #[inline]
    fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { axpy_f32_avx2(alpha, x, y) };
        }
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    #[inline]
    fn gemv_acc(x: &[f32], b: &[f32], n: usize, y: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: as above.
            return unsafe { gemv_f32_avx2(x, b, n, y) };
        }
        gemv_generic(x, b, n, y)
    }

    #[inline]
    fn small_gemm_acc(a: &[f32], k: usize, b: &[f32], n: usize, c: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: as above.
            return unsafe { small_gemm_f32_avx2(a, k, b, n, c) };
        }
        small_gemm_generic(a, k, b, n, c)
    }

    #[inline]
    fn exp_act(self) -> f32 {
        exp_f32(self)
    }

    #[inline]
    fn tanh_act(self) -> f32 {
        let e = exp_f32(-2.0 * self.abs());
        let t = (1.0 - e) / (1.0 + e);
        if self < 0.0 {
            -t
        } else {
            t
        }
    }

    #[inline]
    fn lit(x: f64) -> f32 {
        x as f32
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
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

    #[inline]
    fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { axpy_f64_avx2(alpha, x, y) };
        }
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    #[inline]
    fn gemv_acc(x: &[f64], b: &[f64], n: usize, y: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: as above.
            return unsafe { gemv_f64_avx2(x, b, n, y) };
        }
        gemv_generic(x, b, n, y)
    }

    #[inline]
    fn small_gemm_acc(a: &[f64], k: usize, b: &[f64], n: usize, c: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: as above.
            return unsafe { small_gemm_f64_avx2(a, k, b, n, c) };
        }
        small_gemm_generic(a, k, b, n, c)
    }

    #[inline]
    fn lit(x: f64) -> f64 {
        x
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Tensor2<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor2 { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Contiguous block of rows `start..end`.
    pub fn rows_slice(&self, start: usize, end: usize) -> &[F] {
        &self.data[start * self.cols..end * self.cols]
    }

    pub fn rows_slice_mut(&mut self, start: usize, end: usize) -> &mut [F] {
        &mut self.data[start * self.cols..end * self.cols]
    }

    pub fn fill(&mut self, v: F) {
        self.data.fill(v);
    }

    pub fn map_inplace(&mut self, mut f: impl FnMut(F) -> F) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn add_assign(&mut self, other: &Tensor2<F>) -> Result<()> {
        self.same_shape(other, "add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Tensor2<F>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Adds the `1 x cols` row vector `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &Tensor2<F>) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Shape(format!(
                "bias {:?} for {:?} rows",
                bias.shape(),
                self.shape()
            )));
        }
        for r in 0..self.rows {
            for (v, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Accumulates column sums into the `1 x cols` tensor `out`.
    pub fn col_sums_into(&self, out: &mut Tensor2<F>) -> Result<()> {
        if out.rows != 1 || out.cols != self.cols {
            return Err(Error::Shape(format!(
                "column sums of {:?} into {:?}",
                self.shape(),
                out.shape()
            )));
        }
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum()
    }

    /// `op(a) * op(b)` as a new tensor.
    pub fn matmul(a: &Tensor2<F>, trans_a: bool, b: &Tensor2<F>, trans_b: bool) -> Result<Self> {
        let m = if trans_a { a.cols } else { a.rows };
        let n = if trans_b { b.rows } else { b.cols };
        let mut c = Tensor2::zeros(m, n);
        gemm(
            a.data(),
            a.rows,
            a.cols,
            trans_a,
            b.data(),
            b.rows,
            b.cols,
            trans_b,
            F::zero(),
            c.data_mut(),
            m,
            n,
        )?;
        Ok(c)
    }

    pub fn cast<G: Real>(&self) -> Tensor2<G> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| G::lit(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

/// Largest row count routed to the row-wise kernel.
const SMALL_M: usize = 16;

/// `c = op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is stored `a_rows x a_cols`; with `trans_a` it is used transposed. The
/// same holds for `b`. `c` must be `c_rows x c_cols`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    a: &[F],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[F],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    beta: F,
    c: &mut [F],
    c_rows: usize,
    c_cols: usize,
) -> Result<()> {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    if k != kb
        || m != c_rows
        || n != c_cols
        || a.len() != a_rows * a_cols
        || b.len() != b_rows * b_cols
        || c.len() != c_rows * c_cols
    {
        return Err(Error::Shape(format!(
            "gemm ({a_rows}x{a_cols}{}) * ({b_rows}x{b_cols}{}) -> {c_rows}x{c_cols}",
            if trans_a { "^T" } else { "" },
            if trans_b { "^T" } else { "" },
        )));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return Ok(());
    }
    // A few rows times a plain matrix: row-wise sweeps beat packing for gemm.
    // With m == 1 the single row of op(a) is contiguous either way.
    if !trans_b && (m == 1 || (!trans_a && m <= SMALL_M)) {
        if beta == F::zero() {
            c.fill(F::zero());
        } else if beta != F::one() {
            for v in c.iter_mut() {
                *v *= beta;
            }
        }
        F::small_gemm_acc(a, k, b, n, c);
        return Ok(());
    }
    let (rsa, csa) = if trans_a { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    // SAFETY: dimensions and buffer lengths were validated above, and `c` is
    // a distinct mutable borrow so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            c_cols as isize,
            1,
        );
    }
    Ok(())
}

#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    F::axpy(alpha, x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor2<f64>, ta: bool, b: &Tensor2<f64>, tb: bool) -> Tensor2<f64> {
        let at = |i: usize, j: usize| if ta { a.get(j, i) } else { a.get(i, j) };
        let bt = |i: usize, j: usize| if tb { b.get(j, i) } else { b.get(i, j) };
        let m = if ta { a.cols() } else { a.rows() };
        let k = if ta { a.rows() } else { a.cols() };
        let n = if tb { b.rows() } else { b.cols() };
        Tensor2::from_fn(m, n, |i, j| (0..k).map(|p| at(i, p) * bt(p, j)).sum())
    }

    #[test]
    fn exp_f32_accuracy() {
        let mut worst = 0.0f64;
        for k in -86_000..=88_000 {
            let x = (k as f32 * 1e-3).clamp(-86.0, 88.0);
            let want = (x as f64).exp();
            worst = worst.max(((exp_f32(x) as f64) - want).abs() / want);
        }
        assert!(worst < 2e-7, "relative error {worst:e}");
        assert_eq!(exp_f32(0.0), 1.0);
        assert!(exp_f32(-1e4) > 0.0 && exp_f32(1e4).is_finite());
    }

    #[test]
    fn activation_tanh_accuracy() {
        for k in -2000..=2000 {
            let x = k as f64 * 0.01;
            assert!((x.tanh_act() - x.tanh()).abs() < 4e-16, "x={x}");
            let xf = x as f32;
            assert!((xf.tanh_act() - xf.tanh()).abs() < 3e-7, "x={x}");
        }
        for x in [1e-3f64, 1e-8, 1e-30] {
            assert!((x.tanh_act() / x.tanh() - 1.0).abs() < 1e-14);
        }
        assert_eq!(0.0f32.tanh_act(), 0.0);
        assert_eq!(50.0f32.tanh_act(), 1.0);
        assert_eq!((-50.0f32).tanh_act(), -1.0);
    }

    #[test]
    fn gemm_matches_naive_all_transposes() {
        let a = Tensor2::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 2.0);
        let b = Tensor2::from_fn(4, 5, |i, j| (i as f64 - j as f64) * 0.25);
        let a_t = naive(&a, true, &Tensor2::from_fn(3, 3, |i, j| (i == j) as u8 as f64), false);
        let b_t = naive(&b, true, &Tensor2::from_fn(4, 4, |i, j| (i == j) as u8 as f64), false);
        let want = naive(&a, false, &b, false);
        for (x, ta, y, tb) in [(&a, false, &b, false), (&a_t, true, &b, false), (&a, false, &b_t, true), (&a_t, true, &b_t, true)] {
            let got = Tensor2::matmul(x, ta, y, tb).unwrap();
            assert_eq!(got, want);
        }
        // row-vector fast path with accumulation
        let row = Tensor2::from_vec(1, 4, vec![1.0, -1.0, 0.0, 2.0]).unwrap();
        let mut c = Tensor2::from_vec(1, 5, vec![1.0; 5]).unwrap();
        gemm(row.data(), 1, 4, false, b.data(), 4, 5, false, 2.0, c.data_mut(), 1, 5).unwrap();
        let expect = naive(&row, false, &b, false);
        for j in 0..5 {
            assert_eq!(c.get(0, j), expect.get(0, j) + 2.0);
        }
    }

    #[test]
    fn gemm_rejects_bad_shapes() {
        let a = Tensor2::<f32>::zeros(2, 3);
        let b = Tensor2::<f32>::zeros(2, 3);
        assert!(Tensor2::matmul(&a, false, &b, false).is_err());
        assert!(Tensor2::matmul(&a, false, &b, true).is_ok());
        assert!(Tensor2::<f32>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
