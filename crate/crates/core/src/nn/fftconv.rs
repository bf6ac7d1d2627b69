//! Frequency-domain evaluation of the temporal convolution for wide kernels.
//!
//! Every input row is transformed once, each frequency bin is then a small
//! complex matrix product `Y_f[Cout, K] = W_f[Cout, Cin] X_f[Cin, K]`, and the
//! outputs are transformed back. For the widest layers this is an order of
//! magnitude fewer operations than the direct sum.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

use super::gemm::{gemm_t, Precision, Real, Strides};

/// Direct multiply-accumulate count above which the FFT path is cheaper.
pub(crate) fn prefer_fft(cin: usize, cout: usize, width: usize, tout: usize) -> bool {
    let direct = (cin * cout * width * tout) as f64;
    let n = (tout + width - 1).next_power_of_two() as f64;
    let fft = (cin + cout) as f64 * 5.0 * n * n.log2() + 4.0 * (cin * cout) as f64 * (n / 2.0 + 1.0);
    width >= 8 && direct > 3.0 * fft
}

/// Rows transformed per batch; keeps the bin-major stores cache friendly.
const BLOCK: usize = 32;

/// Scalar type the transforms and bin products run in.
trait Spectral: Real + FftNum {}

impl<T: Real + FftNum> Spectral for T {}

/// Contiguous row-major `c = a(m x k) * b(k x n)`.
fn product<T: Spectral>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_t(
        m,
        k,
        n,
        T::of(1.0),
        a,
        Strides::row_major(k),
        b,
        Strides::row_major(n),
        T::of(0.0),
        c,
        Strides::row_major(n),
    );
}

/// Half spectra (`n / 2 + 1` bins) of `nrows` real rows of length `n`, where
/// `fill(r, dst)` writes row `r` into a zeroed `dst`. Two rows share one
/// complex transform. Bin `f` of row `r` lands at `re[f * stride + r]`.
fn half_spectra<T: Spectral>(
    fft: &dyn Fft<T>,
    n: usize,
    nrows: usize,
    stride: usize,
    re: &mut [T],
    im: &mut [T],
    fill: impl Fn(usize, &mut [T]),
) {
    let bins = n / 2 + 1;
    let zero = Complex::new(T::zero(), T::zero());
    let half = T::of(0.5);
    let mut buf = vec![zero; BLOCK / 2 * n];
    let (mut a, mut b) = (vec![T::zero(); n], vec![T::zero(); n]);
    for r0 in (0..nrows).step_by(BLOCK) {
        let rows = BLOCK.min(nrows - r0);
        let pairs = rows.div_ceil(2);
        for p in 0..pairs {
            a.fill(T::zero());
            b.fill(T::zero());
            fill(r0 + 2 * p, &mut a);
            if 2 * p + 1 < rows {
                fill(r0 + 2 * p + 1, &mut b);
            }
            for (z, (&x, &y)) in buf[p * n..(p + 1) * n].iter_mut().zip(a.iter().zip(&b)) {
                *z = Complex::new(x, y);
            }
        }
        fft.process(&mut buf[..pairs * n]);
        for f in 0..bins {
            let dst = f * stride + r0;
            for p in 0..pairs {
                let z = buf[p * n + f];
                let zc = buf[p * n + (n - f) % n].conj();
                // even part is row a, odd part divided by i is row b
                let (s, d) = (z + zc, z - zc);
                re[dst + 2 * p] = s.re * half;
                im[dst + 2 * p] = s.im * half;
                if 2 * p + 1 < rows {
                    re[dst + 2 * p + 1] = d.im * half;
                    im[dst + 2 * p + 1] = -d.re * half;
                }
            }
        }
    }
}

/// `x[B, Cin, K, T]` correlated with `w[Cout, Cin, W]` after left-padding by
/// `pad` zeros; returns `[B, Cout, K, tout]`.
pub(crate) fn conv_fft(
    precision: Precision,
    x: &[f64],
    w: &[f64],
    dims: (usize, usize, usize, usize),
    kernel: (usize, usize),
    pad: usize,
    tout: usize,
) -> Vec<f64> {
    match precision {
        Precision::F32 => conv_fft_in::<f32>(x, w, dims, kernel, pad, tout),
        Precision::F64 => conv_fft_in::<f64>(x, w, dims, kernel, pad, tout),
    }
}

fn conv_fft_in<T: Spectral>(
    x: &[f64],
    w: &[f64],
    (bsz, cin, k, t): (usize, usize, usize, usize),
    (cout, width): (usize, usize),
    pad: usize,
    tout: usize,
) -> Vec<f64> {
    let lp = tout + width - 1;
    let n = lp.next_power_of_two();
    let bins = n / 2 + 1;
    let mut planner = FftPlanner::<T>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    // kernel spectra, reversed so the product is a correlation; [bin][cout][cin]
    let nw = cout * cin;
    let mut wr = vec![T::zero(); bins * nw];
    let mut wi = vec![T::zero(); bins * nw];
    half_spectra(fwd.as_ref(), n, nw, nw, &mut wr, &mut wi, |r, dst| {
        for (d, &v) in dst.iter_mut().zip(w[r * width..(r + 1) * width].iter().rev()) {
            *d = T::of(v);
        }
    });

    // per bin: [Yr; Yi] = [Wr -Wi; Wi Wr] [Xr; Xi]
    let nx = cin * k;
    let ny = cout * k;
    let mut re = vec![T::zero(); bins * nx];
    let mut im = vec![T::zero(); bins * nx];
    let mut xs = vec![T::zero(); 2 * nx];
    let mut ys = vec![T::zero(); bins * 2 * ny];
    let mut blockw = vec![T::zero(); 4 * nw];
    let mut out = vec![0.0; bsz * ny * tout];
    let len = t.min(lp.saturating_sub(pad));
    let scale = 1.0 / n as f64;
    let zero = Complex::new(T::zero(), T::zero());
    let iu = Complex::new(T::zero(), T::one());
    let mut buf = vec![zero; BLOCK / 2 * n];
    for bi in 0..bsz {
        let xb = &x[bi * nx * t..(bi + 1) * nx * t];
        half_spectra(fwd.as_ref(), n, nx, nx, &mut re, &mut im, |r, dst| {
            for (d, &v) in dst[pad..pad + len].iter_mut().zip(&xb[r * t..r * t + len]) {
                *d = T::of(v);
            }
        });
        for f in 0..bins {
            let (a_r, a_i) = (&wr[f * nw..(f + 1) * nw], &wi[f * nw..(f + 1) * nw]);
            for co in 0..cout {
                let (rrow, irow) = (&a_r[co * cin..(co + 1) * cin], &a_i[co * cin..(co + 1) * cin]);
                let top = &mut blockw[co * 2 * cin..(co + 1) * 2 * cin];
                top[..cin].copy_from_slice(rrow);
                top[cin..].iter_mut().zip(irow).for_each(|(d, &v)| *d = -v);
                let bot = &mut blockw[(cout + co) * 2 * cin..(cout + co + 1) * 2 * cin];
                bot[..cin].copy_from_slice(irow);
                bot[cin..].copy_from_slice(rrow);
            }
            xs[..nx].copy_from_slice(&re[f * nx..(f + 1) * nx]);
            xs[nx..].copy_from_slice(&im[f * nx..(f + 1) * nx]);
            product(2 * cout, 2 * cin, k, &blockw, &xs, &mut ys[f * 2 * ny..(f + 1) * 2 * ny]);
        }
        // two Hermitian spectra per inverse transform: ifft(Ya + i Yb) = ya + i yb
        let ob = &mut out[bi * ny * tout..(bi + 1) * ny * tout];
        for r0 in (0..ny).step_by(BLOCK) {
            let rows = BLOCK.min(ny - r0);
            let pairs = rows.div_ceil(2);
            for f in 0..bins {
                let yr = &ys[f * 2 * ny..f * 2 * ny + ny];
                let yi = &ys[f * 2 * ny + ny..(f + 1) * 2 * ny];
                for p in 0..pairs {
                    let ra = r0 + 2 * p;
                    let ya = Complex::new(yr[ra], yi[ra]);
                    let yb = if 2 * p + 1 < rows {
                        Complex::new(yr[ra + 1], yi[ra + 1])
                    } else {
                        zero
                    };
                    buf[p * n + f] = ya + iu * yb;
                    if f != 0 && f != n / 2 {
                        buf[p * n + n - f] = ya.conj() + iu * yb.conj();
                    }
                }
            }
            inv.process(&mut buf[..pairs * n]);
            for p in 0..pairs {
                let src = &buf[p * n + width - 1..p * n + width - 1 + tout];
                let ra = r0 + 2 * p;
                for (d, z) in ob[ra * tout..(ra + 1) * tout].iter_mut().zip(src) {
                    *d = z.re.to() * scale;
                }
                if 2 * p + 1 < rows {
                    for (d, z) in ob[(ra + 1) * tout..(ra + 2) * tout].iter_mut().zip(src) {
                        *d = z.im.to() * scale;
                    }
                }
            }
        }
    }
    out
}
