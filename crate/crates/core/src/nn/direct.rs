//! Register-blocked single-precision correlation kernels.
//!
//! With few output channels the GEMM formulation spends most of its time
//! packing operands. These kernels keep a block of output channels times a
//! block of time steps in vector registers instead. They are compiled for
//! AVX2 with FMA and used only when the CPU supports both.

/// Output channels per register block.
const CB: usize = 4;
/// Time steps per register block, two vectors.
const JB: usize = 16;
/// Kernel taps per vector in the weight-gradient kernel.
const TB: usize = 8;

/// Whether the vector kernels can run on this CPU.
pub(crate) fn available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Operands of `out[co][j] += sum_ci sum_w w[co][ci][w] x[ci][j + w]` for
/// `j < n`. Rows of `x` start `xs` apart, rows of `out` `os` apart.
pub(crate) struct Corr<'a> {
    pub w: &'a [f32],
    pub x: &'a [f32],
    pub cin: usize,
    pub cout: usize,
    pub width: usize,
    pub n: usize,
    pub xs: usize,
    pub os: usize,
}

/// Accumulates the correlation into `out`.
pub(crate) fn correlate(c: &Corr, out: &mut [f32]) {
    assert!(available());
    assert!(c.w.len() >= c.cout * c.cin * c.width);
    if c.n == 0 || c.cout == 0 {
        return;
    }
    assert!(c.cin == 0 || (c.cin - 1) * c.xs + c.n + c.width - 1 <= c.x.len());
    assert!((c.cout - 1) * c.os + c.n <= out.len());
    #[cfg(target_arch = "x86_64")]
    // SAFETY: the CPU features were checked above.
    unsafe {
        correlate_avx(c, out)
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn correlate_avx(c: &Corr, out: &mut [f32]) {
    use std::arch::x86_64::*;
    let full = c.n - c.n % JB;
    let mut co0 = 0;
    while co0 + CB <= c.cout {
        for j0 in (0..full).step_by(JB) {
            let mut a = [[_mm256_setzero_ps(); 2]; CB];
            for ci in 0..c.cin {
                let xrow = &c.x[ci * c.xs + j0..][..c.width + JB - 1];
                for t in 0..c.width {
                    let p = xrow[t..t + JB].as_ptr();
                    let (x0, x1) = (_mm256_loadu_ps(p), _mm256_loadu_ps(p.add(8)));
                    for (b, acc) in a.iter_mut().enumerate() {
                        let wv = _mm256_set1_ps(c.w[((co0 + b) * c.cin + ci) * c.width + t]);
                        acc[0] = _mm256_fmadd_ps(wv, x0, acc[0]);
                        acc[1] = _mm256_fmadd_ps(wv, x1, acc[1]);
                    }
                }
            }
            for (b, acc) in a.iter().enumerate() {
                let dst = out[(co0 + b) * c.os + j0..][..JB].as_mut_ptr();
                _mm256_storeu_ps(dst, _mm256_add_ps(_mm256_loadu_ps(dst), acc[0]));
                _mm256_storeu_ps(dst.add(8), _mm256_add_ps(_mm256_loadu_ps(dst.add(8)), acc[1]));
            }
        }
        co0 += CB;
    }
    // leftover channels and time steps
    for co in 0..c.cout {
        let j_start = if co < co0 { full } else { 0 };
        for j in j_start..c.n {
            let mut s = 0f32;
            for ci in 0..c.cin {
                let wr = &c.w[(co * c.cin + ci) * c.width..][..c.width];
                let xr = &c.x[ci * c.xs + j..][..c.width];
                s += wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f32>();
            }
            out[co * c.os + j] += s;
        }
    }
}

/// Operands of `dw[co][ci][w] += sum_{j < n} g[co][j] x[ci][j + w]`. Rows of
/// `g` start `gs` apart, rows of `x` `xs` apart.
pub(crate) struct KernelGrad<'a> {
    pub g: &'a [f32],
    pub x: &'a [f32],
    pub cin: usize,
    pub cout: usize,
    pub width: usize,
    pub n: usize,
    pub gs: usize,
    pub xs: usize,
}

/// Accumulates the kernel gradient into `dw[Cout][Cin][W]`.
pub(crate) fn kernel_grad(k: &KernelGrad, dw: &mut [f32]) {
    assert!(available());
    assert!(dw.len() >= k.cout * k.cin * k.width);
    if k.n == 0 || k.cout == 0 || k.cin == 0 {
        return;
    }
    assert!((k.cout - 1) * k.gs + k.n <= k.g.len());
    assert!((k.cin - 1) * k.xs + k.n + k.width - 1 <= k.x.len());
    #[cfg(target_arch = "x86_64")]
    // SAFETY: the CPU features were checked above.
    unsafe {
        kernel_grad_avx(k, dw)
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn kernel_grad_avx(k: &KernelGrad, dw: &mut [f32]) {
    use std::arch::x86_64::*;
    // lanes run over kernel taps; every time step broadcasts one gradient value
    let tfull = k.width - k.width % TB;
    for ci in 0..k.cin {
        let xrow = &k.x[ci * k.xs..];
        let mut co0 = 0;
        while co0 + CB <= k.cout {
            for t0 in (0..tfull).step_by(TB) {
                let mut a = [_mm256_setzero_ps(); CB];
                let xs = &xrow[t0..t0 + k.n + TB - 1];
                for j in 0..k.n {
                    let xv = _mm256_loadu_ps(xs[j..j + TB].as_ptr());
                    for (b, acc) in a.iter_mut().enumerate() {
                        let gv = _mm256_set1_ps(k.g[(co0 + b) * k.gs + j]);
                        *acc = _mm256_fmadd_ps(gv, xv, *acc);
                    }
                }
                for (b, acc) in a.iter().enumerate() {
                    let dst = dw[((co0 + b) * k.cin + ci) * k.width + t0..][..TB].as_mut_ptr();
                    _mm256_storeu_ps(dst, _mm256_add_ps(_mm256_loadu_ps(dst), *acc));
                }
            }
            co0 += CB;
        }
        // leftover channels and taps
        for co in 0..k.cout {
            let t_start = if co < co0 { tfull } else { 0 };
            let g = &k.g[co * k.gs..co * k.gs + k.n];
            for t in t_start..k.width {
                dw[(co * k.cin + ci) * k.width + t] += g.iter().zip(&xrow[t..]).map(|(a, b)| a * b).sum::<f32>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(len: usize, seed: usize) -> Vec<f32> {
        (0..len).map(|i| ((i * 7919 + seed * 31) % 101) as f32 / 101.0 - 0.5).collect()
    }

    #[test]
    fn correlation_matches_loops() {
        if !available() {
            return;
        }
        for (cin, cout, width, n) in [(3, 9, 5, 37), (1, 4, 8, 16), (2, 2, 3, 5)] {
            let (xs, os) = (n + width + 3, n + 2);
            let w = data(cout * cin * width, 1);
            let x = data(cin * xs, 2);
            let mut out = data(cout * os, 3);
            let mut want = out.clone();
            for co in 0..cout {
                for j in 0..n {
                    let mut s = 0.0f64;
                    for ci in 0..cin {
                        for t in 0..width {
                            s += w[(co * cin + ci) * width + t] as f64 * x[ci * xs + j + t] as f64;
                        }
                    }
                    want[co * os + j] += s as f32;
                }
            }
            correlate(
                &Corr {
                    w: &w,
                    x: &x,
                    cin,
                    cout,
                    width,
                    n,
                    xs,
                    os,
                },
                &mut out,
            );
            assert!(out.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }

    #[test]
    fn kernel_gradient_matches_loops() {
        if !available() {
            return;
        }
        for (cin, cout, width, n) in [(3, 9, 5, 37), (2, 4, 8, 16), (1, 1, 3, 5)] {
            let (gs, xs) = (n + 1, n + width + 2);
            let g = data(cout * gs, 4);
            let x = data(cin * xs, 5);
            let mut dw = data(cout * cin * width, 6);
            let mut want = dw.clone();
            for co in 0..cout {
                for ci in 0..cin {
                    for t in 0..width {
                        let s: f64 = (0..n).map(|j| g[co * gs + j] as f64 * x[ci * xs + j + t] as f64).sum();
                        want[(co * cin + ci) * width + t] += s as f32;
                    }
                }
            }
            kernel_grad(
                &KernelGrad {
                    g: &g,
                    x: &x,
                    cin,
                    cout,
                    width,
                    n,
                    gs,
                    xs,
                },
                &mut dw,
            );
            assert!(dw.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }
}
