//! Dense matrix multiply with an OpenBLAS backend and a pure-Rust fallback.
//!
//! All tensor contractions in this crate funnel through [`Scalar::gemm`], so
//! swapping the backend is a feature flag, not a code change. Results are
//! deterministic on a given machine: both backends use fixed blocking and a
//! single thread here.

use ndarray::{Array2, ArrayView2};

#[cfg(feature = "openblas")]
mod cblas {
    pub const ROW_MAJOR: i32 = 101;
    pub const NO_TRANS: i32 = 111;
    pub const TRANS: i32 = 112;

    extern "C" {
        pub fn cblas_sgemm(
            layout: i32,
            transa: i32,
            transb: i32,
            m: i32,
            n: i32,
            k: i32,
            alpha: f32,
            a: *const f32,
            lda: i32,
            b: *const f32,
            ldb: i32,
            beta: f32,
            c: *mut f32,
            ldc: i32,
        );
        pub fn cblas_dgemm(
            layout: i32,
            transa: i32,
            transb: i32,
            m: i32,
            n: i32,
            k: i32,
            alpha: f64,
            a: *const f64,
            lda: i32,
            b: *const f64,
            ldb: i32,
            beta: f64,
            c: *mut f64,
            ldc: i32,
        );
        pub fn openblas_set_num_threads(n: i32);
    }
}

/// Pin the BLAS thread count. Called once from library entry points that care
/// about reproducibility; a no-op without the `openblas` feature.
pub fn set_blas_threads(n: usize) {
    #[cfg(feature = "openblas")]
    unsafe {
        cblas::openblas_set_num_threads(n as i32);
    }
    #[cfg(not(feature = "openblas"))]
    let _ = n;
}

/// Element type for all tensors: f32 for fast training, f64 for oracles and
/// finite-difference checks.
pub trait Scalar:
    'static
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + ndarray::ScalarOperand
    + std::iter::Sum
    + serde::Serialize
    + for<'de> serde::Deserialize<'de>
{
    /// C = alpha * op(A) @ op(B) + beta * C, row-major.
    ///
    /// op(A) is m x k. If `trans_a`, the buffer holds A as k x m with leading
    /// dimension `lda` and op(A) = A^T (likewise for B). C is m x n with
    /// leading dimension `ldc`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    );

    fn cast_from(v: f64) -> Self;
    fn cast_f64(self) -> f64;

    const DTYPE_TAG: u8;
}

macro_rules! impl_scalar {
    ($t:ty, $cblas:ident, $mm:ident, $tag:expr) => {
        impl Scalar for $t {
            #[allow(unused_variables)]
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                lda: usize,
                b: &[Self],
                ldb: usize,
                beta: Self,
                c: &mut [Self],
                ldc: usize,
            ) {
                debug_assert!(c.len() >= m.saturating_sub(1) * ldc + n.max(1) || m == 0 || n == 0);
                if m == 0 || n == 0 {
                    return;
                }
                #[cfg(feature = "openblas")]
                unsafe {
                    cblas::$cblas(
                        cblas::ROW_MAJOR,
                        if trans_a { cblas::TRANS } else { cblas::NO_TRANS },
                        if trans_b { cblas::TRANS } else { cblas::NO_TRANS },
                        m as i32,
                        n as i32,
                        k as i32,
                        alpha,
                        a.as_ptr(),
                        lda as i32,
                        b.as_ptr(),
                        ldb as i32,
                        beta,
                        c.as_mut_ptr(),
                        ldc as i32,
                    );
                }
                #[cfg(not(feature = "openblas"))]
                unsafe {
                    let (rsa, csa) = if trans_a { (1, lda as isize) } else { (lda as isize, 1) };
                    let (rsb, csb) = if trans_b { (1, ldb as isize) } else { (ldb as isize, 1) };
                    matrixmultiply::$mm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        ldc as isize,
                        1,
                    );
                }
            }

            fn cast_from(v: f64) -> Self {
                v as $t
            }
            fn cast_f64(self) -> f64 {
                self as f64
            }

            const DTYPE_TAG: u8 = $tag;
        }
    };
}

impl_scalar!(f32, cblas_sgemm, sgemm, 1);
impl_scalar!(f64, cblas_dgemm, dgemm, 2);

/// Standard row-major 2-D matmul. Copies inputs to standard layout if needed.
pub fn matmul2<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "matmul inner dims {} vs {}", ka, kb);
    let a_std;
    let a_slice = match a.as_slice() {
        Some(s) => s,
        None => {
            a_std = a.to_owned();
            a_std.as_slice().unwrap()
        }
    };
    let b_std;
    let b_slice = match b.as_slice() {
        Some(s) => s,
        None => {
            b_std = b.to_owned();
            b_std.as_slice().unwrap()
        }
    };
    let mut c = Array2::<T>::zeros((m, n));
    T::gemm(
        false,
        false,
        m,
        n,
        ka,
        T::one(),
        a_slice,
        ka,
        b_slice,
        n,
        T::zero(),
        c.as_slice_mut().unwrap(),
        n,
    );
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_matches_naive() {
        let a = array![[1.0f64, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = array![[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]];
        let c = matmul2(a.view(), b.view());
        assert_eq!(c, array![[58.0, 64.0], [139.0, 154.0]]);
    }

    #[test]
    fn gemm_transpose_flags() {
        // op(A) = A^T where A is stored 3x2: effective 2x3 times 3x2.
        let a = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2 storage
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2 storage
        let mut c = [0.0f64; 4];
        f64::gemm(true, false, 2, 2, 3, 1.0, &a, 2, &b, 2, 0.0, &mut c, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_f32_accumulates_beta() {
        let a = [1.0f32, 0.0, 0.0, 1.0];
        let b = [2.0f32, 0.0, 0.0, 2.0];
        let mut c = [1.0f32, 1.0, 1.0, 1.0];
        f32::gemm(false, false, 2, 2, 2, 1.0, &a, 2, &b, 2, 1.0, &mut c, 2);
        assert_eq!(c, [3.0, 1.0, 1.0, 3.0]);
    }
}
