//! Strided matrix products over `f64` buffers, optionally computed in single
//! precision.

use serde::{Deserialize, Serialize};

/// Arithmetic precision of matrix products and stored parameters.
///
/// `F32` runs every GEMM (linear layers, attention, convolution) through
/// `sgemm` and keeps parameters rounded to `f32`, which is what checkpoints
/// store. `F64` is exact double precision, used for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Row/column strides of a matrix operand.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strides {
    pub rs: isize,
    pub cs: isize,
}

impl Strides {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols as isize }
    }
}

/// `c <- alpha * a(m x k) * b(k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    precision: Precision,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    check_bounds(a.len(), m, k, sa);
    check_bounds(b.len(), k, n, sb);
    check_bounds(c.len(), m, n, sc);
    match precision {
        Precision::F64 => unsafe {
            // SAFETY: every index reachable through the strides is in bounds (checked above).
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                sa.rs,
                sa.cs,
                b.as_ptr(),
                sb.rs,
                sb.cs,
                beta,
                c.as_mut_ptr(),
                sc.rs,
                sc.cs,
            )
        },
        Precision::F32 => {
            // gather into contiguous f32 buffers so only the addressed elements are touched
            let a32 = gather(a, m, k, sa);
            let b32 = gather(b, k, n, sb);
            let mut c32 = if beta == 0.0 { vec![0f32; m * n] } else { gather(c, m, n, sc) };
            unsafe {
                // SAFETY: contiguous row-major buffers of exactly m*k, k*n and m*n values.
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    alpha as f32,
                    a32.as_ptr(),
                    k as isize,
                    1,
                    b32.as_ptr(),
                    n as isize,
                    1,
                    beta as f32,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                )
            };
            for i in 0..m {
                for j in 0..n {
                    c[i * sc.rs as usize + j * sc.cs as usize] = c32[i * n + j] as f64;
                }
            }
        }
    }
}

/// Element type with a native GEMM.
pub(crate) trait Real: Copy + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn to(self) -> f64;
    /// # Safety
    /// Every element addressed through the strides must be in bounds, and `c`
    /// must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        sa: Strides,
        b: *const Self,
        sb: Strides,
        beta: Self,
        c: *mut Self,
        sc: Strides,
    );
}

macro_rules! real_impl {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn of(v: f64) -> Self {
                v as $t
            }
            fn to(self) -> f64 {
                self as f64
            }
            unsafe fn raw_gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                sa: Strides,
                b: *const Self,
                sb: Strides,
                beta: Self,
                c: *mut Self,
                sc: Strides,
            ) {
                $gemm(m, k, n, alpha, a, sa.rs, sa.cs, b, sb.rs, sb.cs, beta, c, sc.rs, sc.cs)
            }
        }
    };
}

real_impl!(f32, matrixmultiply::sgemm);
real_impl!(f64, matrixmultiply::dgemm);

/// `c <- alpha * a * b + beta * c` on native buffers. Operand strides may
/// overlap (a Hankel view has both strides equal to one); `c`'s may not.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_t<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    check_bounds(a.len(), m, k, sa);
    check_bounds(b.len(), k, n, sb);
    check_bounds(c.len(), m, n, sc);
    // SAFETY: bounds checked above; `c` is a distinct mutable borrow.
    unsafe { T::raw_gemm(m, k, n, alpha, a.as_ptr(), sa, b.as_ptr(), sb, beta, c.as_mut_ptr(), sc) }
}

fn gather(x: &[f64], rows: usize, cols: usize, s: Strides) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(x[i * s.rs as usize + j * s.cs as usize] as f32);
        }
    }
    out
}

fn check_bounds(len: usize, rows: usize, cols: usize, s: Strides) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(s.rs >= 0 && s.cs >= 0, "negative strides unsupported");
    let last = (rows - 1) * s.rs as usize + (cols - 1) * s.cs as usize;
    assert!(last < len, "gemm operand out of bounds: {last} >= {len}");
}
