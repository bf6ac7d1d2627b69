//! Direct temporal convolution as GEMMs over Hankel views.
//!
//! The `K` rows of one input plane are laid end to end with their padding, so
//! a single matrix whose rows are shifted copies of that strip (both strides
//! one) turns every correlation into one GEMM per input plane. Columns that
//! straddle two rows are computed and dropped.

use super::direct::{self, Corr, KernelGrad};
use super::gemm::{gemm_t, Precision, Real, Strides};

const HANKEL: Strides = Strides { rs: 1, cs: 1 };

/// Shapes of one convolution: `x[B, Cin, K, T]`, `w[Cout, Cin, W]`, left
/// padding `pad` and output length `tout`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub bsz: usize,
    pub cin: usize,
    pub k: usize,
    pub t: usize,
    pub cout: usize,
    pub width: usize,
    pub pad: usize,
    pub tout: usize,
}

impl ConvDims {
    /// Padded row length.
    fn tp(&self) -> usize {
        self.tout + self.width - 1
    }

    /// Columns of the strip product: every shift that stays inside the strip.
    fn cols(&self) -> usize {
        self.k * self.tp() - (self.width - 1)
    }
}

/// Zero-padded rows of sample `bi`, `[Cin][K * tp]`.
fn padded_strips<T: Real>(x: &[f64], d: &ConvDims, bi: usize, out: &mut [T]) {
    let tp = d.tp();
    let len = d.t.min(tp - d.pad);
    out.fill(T::default());
    for ci in 0..d.cin {
        for ki in 0..d.k {
            let src = &x[((bi * d.cin + ci) * d.k + ki) * d.t..][..len];
            let dst = &mut out[(ci * d.k + ki) * tp + d.pad..][..len];
            dst.iter_mut().zip(src).for_each(|(o, &v)| *o = T::of(v));
        }
    }
}

pub(crate) fn forward(precision: Precision, x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    match precision {
        Precision::F32 if direct::available() => forward_direct(x, w, d),
        Precision::F32 => forward_in::<f32>(x, w, d),
        Precision::F64 => forward_in::<f64>(x, w, d),
    }
}

fn forward_in<T: Real>(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let (tp, n) = (d.tp(), d.cols());
    let strip = d.k * tp;
    let wt: Vec<T> = w.iter().map(|&v| T::of(v)).collect();
    let mut xp = vec![T::default(); d.cin * strip];
    let mut acc = vec![T::default(); d.cout * strip];
    let mut out = vec![0.0; d.bsz * d.cout * d.k * d.tout];
    for bi in 0..d.bsz {
        padded_strips(x, d, bi, &mut xp);
        for ci in 0..d.cin {
            let beta = T::of(if ci == 0 { 0.0 } else { 1.0 });
            gemm_t(
                d.cout,
                d.width,
                n,
                T::of(1.0),
                &wt[ci * d.width..],
                Strides::row_major(d.cin * d.width),
                &xp[ci * strip..(ci + 1) * strip],
                HANKEL,
                beta,
                &mut acc,
                Strides::row_major(strip),
            );
        }
        let plane = d.cout * d.k * d.tout;
        scatter_rows(&acc, d, &mut out[bi * plane..(bi + 1) * plane]);
    }
    out
}

/// Gradient strips of sample `bi` with `width - 1` leading zeros,
/// `gz[co][width - 1 + ki * tp + j]`.
fn gradient_strips<T: Real>(g: &[f64], d: &ConvDims, bi: usize, gz: &mut [T]) {
    let (tp, wd) = (d.tp(), d.width);
    let glen = d.k * tp + wd - 1;
    for co in 0..d.cout {
        for ki in 0..d.k {
            let src = &g[((bi * d.cout + co) * d.k + ki) * d.tout..][..d.tout];
            let dst = &mut gz[co * glen + wd - 1 + ki * tp..][..d.tout];
            dst.iter_mut().zip(src).for_each(|(o, &v)| *o = T::of(v));
        }
    }
}

fn forward_direct(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let strip = d.k * d.tp();
    let wt: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    let mut xp = vec![0f32; d.cin * strip];
    let mut acc = vec![0f32; d.cout * strip];
    let mut out = vec![0.0; d.bsz * d.cout * d.k * d.tout];
    let plane = d.cout * d.k * d.tout;
    for bi in 0..d.bsz {
        padded_strips(x, d, bi, &mut xp);
        acc.fill(0.0);
        let c = Corr {
            w: &wt,
            x: &xp,
            cin: d.cin,
            cout: d.cout,
            width: d.width,
            n: d.cols(),
            xs: strip,
            os: strip,
        };
        direct::correlate(&c, &mut acc);
        scatter_rows(&acc, d, &mut out[bi * plane..(bi + 1) * plane]);
    }
    out
}

/// Valid columns of `acc[Cout][K * tp]` into `dst[Cout, K, tout]`.
fn scatter_rows<T: Real>(acc: &[T], d: &ConvDims, dst: &mut [f64]) {
    let tp = d.tp();
    for (r, row) in dst.chunks_mut(d.tout).enumerate() {
        row.iter_mut().zip(&acc[r * tp..]).for_each(|(o, &v)| *o = v.to());
    }
}

fn backward_direct(x: &[f64], w: &[f64], g: &[f64], d: &ConvDims, want_dx: bool, want_dw: bool) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (tp, wd) = (d.tp(), d.width);
    let strip = d.k * tp;
    let glen = strip + wd - 1;
    let mut gz = vec![0f32; d.cout * glen];
    // kernels reversed in time with the channel axes swapped, [Cin][Cout][W]
    let mut wf = vec![0f32; w.len()];
    for co in 0..d.cout {
        for ci in 0..d.cin {
            let src = &w[(co * d.cin + ci) * wd..][..wd];
            let dst = &mut wf[(ci * d.cout + co) * wd..][..wd];
            dst.iter_mut().zip(src.iter().rev()).for_each(|(o, &v)| *o = v as f32);
        }
    }
    let mut xp = vec![0f32; if want_dw { d.cin * strip } else { 0 }];
    let mut dxp = vec![0f32; if want_dx { d.cin * strip } else { 0 }];
    let mut dwt = vec![0f32; if want_dw { w.len() } else { 0 }];
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    for bi in 0..d.bsz {
        gradient_strips(g, d, bi, &mut gz);
        if want_dw {
            padded_strips(x, d, bi, &mut xp);
            let k = KernelGrad {
                g: &gz[wd - 1..],
                x: &xp,
                cin: d.cin,
                cout: d.cout,
                width: wd,
                n: d.cols(),
                gs: glen,
                xs: strip,
            };
            direct::kernel_grad(&k, &mut dwt);
        }
        if let Some(dx) = dx.as_mut() {
            dxp.fill(0.0);
            let c = Corr {
                w: &wf,
                x: &gz,
                cin: d.cout,
                cout: d.cin,
                width: wd,
                n: strip,
                xs: glen,
                os: strip,
            };
            direct::correlate(&c, &mut dxp);
            unpad_rows(&dxp, d, bi, dx);
        }
    }
    let dw = want_dw.then(|| dwt.iter().map(|&v| v as f64).collect());
    (dx, dw)
}

/// Adds the unpadded part of `dxp[Cin][K * tp]` into sample `bi` of `dx`.
fn unpad_rows<T: Real>(dxp: &[T], d: &ConvDims, bi: usize, dx: &mut [f64]) {
    let tp = d.tp();
    let len = d.t.min(tp - d.pad);
    for ci in 0..d.cin {
        for ki in 0..d.k {
            let src = &dxp[(ci * d.k + ki) * tp + d.pad..][..len];
            let dst = &mut dx[((bi * d.cin + ci) * d.k + ki) * d.t..][..len];
            dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v.to());
        }
    }
}

/// Input and kernel gradients for output gradient `g[B, Cout, K, tout]`.
pub(crate) fn backward(
    precision: Precision,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &ConvDims,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    match precision {
        Precision::F32 if direct::available() => backward_direct(x, w, g, d, want_dx, want_dw),
        Precision::F32 => backward_in::<f32>(x, w, g, d, want_dx, want_dw),
        Precision::F64 => backward_in::<f64>(x, w, g, d, want_dx, want_dw),
    }
}

fn backward_in<T: Real>(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &ConvDims,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (tp, n, wd) = (d.tp(), d.cols(), d.width);
    let strip = d.k * tp;
    // gradient strips with wd - 1 leading zeros: gz[co][wd - 1 + ki * tp + j]
    let glen = strip + wd - 1;
    let mut gz = vec![T::default(); d.cout * glen];
    // kernels reversed in time, [Cout][Cin][W]
    let wf: Vec<T> = w.chunks(wd).flat_map(|k| k.iter().rev().map(|&v| T::of(v))).collect();
    let mut xp = vec![T::default(); if want_dw { d.cin * strip } else { 0 }];
    let mut dxp = vec![T::default(); if want_dx { d.cin * strip } else { 0 }];
    let mut dwt = vec![T::default(); if want_dw { w.len() } else { 0 }];
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    for bi in 0..d.bsz {
        gradient_strips(g, d, bi, &mut gz);
        if want_dw {
            padded_strips(x, d, bi, &mut xp);
            // dW[co, ci, :] += G[co, :n] H(x_ci)^T, H^T[u][w] = x_ci[u + w]
            for ci in 0..d.cin {
                gemm_t(
                    d.cout,
                    n,
                    wd,
                    T::of(1.0),
                    &gz[wd - 1..],
                    Strides::row_major(glen),
                    &xp[ci * strip..(ci + 1) * strip],
                    HANKEL,
                    T::of(1.0),
                    &mut dwt[ci * wd..],
                    Strides::row_major(d.cin * wd),
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dx_ci[s] = sum_co sum_w' wflip[co, ci, w'] gz[co][s + w']
            for co in 0..d.cout {
                let beta = T::of(if co == 0 { 0.0 } else { 1.0 });
                gemm_t(
                    d.cin,
                    wd,
                    strip,
                    T::of(1.0),
                    &wf[co * d.cin * wd..(co + 1) * d.cin * wd],
                    Strides::row_major(wd),
                    &gz[co * glen..(co + 1) * glen],
                    HANKEL,
                    beta,
                    &mut dxp,
                    Strides::row_major(strip),
                );
            }
            unpad_rows(&dxp, d, bi, dx);
        }
    }
    let dw = want_dw.then(|| dwt.iter().map(|v| v.to()).collect());
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.bsz * d.cout * d.k * d.tout];
        for bi in 0..d.bsz {
            for co in 0..d.cout {
                for ki in 0..d.k {
                    for j in 0..d.tout {
                        let mut s = 0.0;
                        for ci in 0..d.cin {
                            for wi in 0..d.width {
                                let src = j as isize + wi as isize - d.pad as isize;
                                if src >= 0 && (src as usize) < d.t {
                                    s += w[(co * d.cin + ci) * d.width + wi] * x[((bi * d.cin + ci) * d.k + ki) * d.t + src as usize];
                                }
                            }
                        }
                        out[((bi * d.cout + co) * d.k + ki) * d.tout + j] = s;
                    }
                }
            }
        }
        out
    }

    fn dims(pad: usize, tout: usize) -> ConvDims {
        ConvDims {
            bsz: 2,
            cin: 3,
            k: 2,
            t: 11,
            cout: 4,
            width: 4,
            pad,
            tout,
        }
    }

    fn data(d: &ConvDims) -> (Vec<f64>, Vec<f64>) {
        let x = (0..d.bsz * d.cin * d.k * d.t)
            .map(|i| ((i * 37) % 19) as f64 / 19.0 - 0.5)
            .collect();
        let w = (0..d.cout * d.cin * d.width).map(|i| ((i * 53) % 23) as f64 / 23.0 - 0.5).collect();
        (x, w)
    }

    #[test]
    fn forward_matches_oracle() {
        for d in [dims(0, 8), dims(1, 11)] {
            let (x, w) = data(&d);
            let want = oracle(&x, &w, &d);
            let got = forward(Precision::F64, &x, &w, &d);
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
            let got = forward(Precision::F32, &x, &w, &d);
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <conv(x, w), g> is bilinear, so its gradients follow from the oracle
        for d in [dims(0, 8), dims(1, 11)] {
            let (x, w) = data(&d);
            let g: Vec<f64> = (0..d.bsz * d.cout * d.k * d.tout)
                .map(|i| ((i * 29) % 17) as f64 / 17.0 - 0.5)
                .collect();
            let (dx, dw) = backward(Precision::F64, &x, &w, &g, &d, true, true);
            let (dx, dw) = (dx.unwrap(), dw.unwrap());
            let inner = |x: &[f64], w: &[f64]| oracle(x, w, &d).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..x.len() {
                let mut e = vec![0.0; x.len()];
                e[i] = 1.0;
                assert!((inner(&e, &w) - dx[i]).abs() < 1e-12);
            }
            for i in 0..w.len() {
                let mut e = vec![0.0; w.len()];
                e[i] = 1.0;
                assert!((inner(&x, &e) - dw[i]).abs() < 1e-12);
            }
            let (dx32, dw32) = backward(Precision::F32, &x, &w, &g, &d, true, true);
            assert!(dx32.unwrap().iter().zip(&dx).all(|(a, b)| (a - b).abs() < 1e-5));
            assert!(dw32.unwrap().iter().zip(&dw).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }
}
