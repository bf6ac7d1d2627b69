//! Bicubic (cubic-convolution) resampling.
//!
//! Each output sample is a weighted sum over a 4x4 source neighbourhood with
//! the separable Keys kernel (a = -0.5). Output pixel centres map back to
//! source coordinates with the half-pixel convention and out-of-range taps
//! clamp to the nearest edge.

use crate::error::{invalid, Result};

use super::Tensor;

/// Keys cubic-convolution parameter.
pub const CUBIC_A: f64 = -0.5;

/// Cubic convolution kernel evaluated at distance `d`.
pub fn cubic_kernel(d: f64) -> f64 {
    let a = CUBIC_A;
    let x = d.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Interpolation taps for one output coordinate along one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    /// Source index nearest below the sample point (clamped).
    pub base: usize,
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

pub(crate) fn axis_taps(src_len: usize, dst_len: usize) -> Vec<Taps> {
    let scale = src_len as f64 / dst_len as f64;
    let last = src_len as isize - 1;
    (0..dst_len)
        .map(|i| {
            let s = (i as f64 + 0.5) * scale - 0.5;
            let x0 = s.floor();
            let frac = s - x0;
            let x0 = x0 as isize;
            let clamp = |v: isize| v.clamp(0, last) as usize;
            Taps {
                base: clamp(x0),
                idx: [clamp(x0 - 1), clamp(x0), clamp(x0 + 1), clamp(x0 + 2)],
                w: [
                    cubic_kernel(frac + 1.0),
                    cubic_kernel(frac),
                    cubic_kernel(1.0 - frac),
                    cubic_kernel(2.0 - frac),
                ],
            }
        })
        .collect()
}

/// Applies taps along a strided axis: `y = x[base] + sum w_m (x[idx_m] - x[base])`.
///
/// The difference form reproduces constant signals exactly, since the kernel
/// weights sum to one.
fn interp(x: &[f64], stride: usize, t: &Taps) -> f64 {
    let b = x[t.base * stride];
    let mut acc = 0.0;
    for m in 0..4 {
        acc += t.w[m] * (x[t.idx[m] * stride] - b);
    }
    b + acc
}

/// Resizes the last two axes of `x` to `out_h x out_w`.
pub(crate) fn resize_forward(x: &[f64], h: usize, w: usize, rows: &[Taps], cols: &[Taps]) -> Vec<f64> {
    let (oh, ow) = (rows.len(), cols.len());
    let planes = x.len() / (h * w);
    let mut out = vec![0.0; planes * oh * ow];
    let mut tmp = vec![0.0; oh * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (i, t) in rows.iter().enumerate() {
            for j in 0..w {
                tmp[i * w + j] = interp(&src[j..], w, t);
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let row = &tmp[i * w..(i + 1) * w];
            for (j, t) in cols.iter().enumerate() {
                dst[i * ow + j] = interp(row, 1, t);
            }
        }
    }
    out
}

/// Adjoint of [`resize_forward`].
pub(crate) fn resize_backward(dy: &[f64], h: usize, w: usize, rows: &[Taps], cols: &[Taps]) -> Vec<f64> {
    let (oh, ow) = (rows.len(), cols.len());
    let planes = dy.len() / (oh * ow);
    let mut dx = vec![0.0; planes * h * w];
    let mut tmp = vec![0.0; oh * w];
    let scatter = |g: f64, t: &Taps, dst: &mut [f64], stride: usize| {
        let wsum: f64 = t.w.iter().sum();
        dst[t.base * stride] += g * (1.0 - wsum);
        for m in 0..4 {
            dst[t.idx[m] * stride] += g * t.w[m];
        }
    };
    for p in 0..planes {
        tmp.iter_mut().for_each(|v| *v = 0.0);
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for (j, t) in cols.iter().enumerate() {
                scatter(g[i * ow + j], t, &mut tmp[i * w..(i + 1) * w], 1);
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, t) in rows.iter().enumerate() {
            for j in 0..w {
                scatter(tmp[i * w + j], t, &mut dst[j..], w);
            }
        }
    }
    dx
}

/// Resizes a tensor whose last two axes are (H, W).
pub fn bicubic_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(invalid!("bicubic resize needs at least 2 axes"));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    if h < 2 || w < 2 {
        return Err(invalid!("bicubic source must be at least 2x2, got {h}x{w}"));
    }
    if out_h < 1 || out_w < 1 {
        return Err(invalid!("output dimensions must be >= 1"));
    }
    let out = resize_forward(x.data(), h, w, &axis_taps(h, out_h), &axis_taps(w, out_w));
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = out_h;
    shape[nd - 1] = out_w;
    Tensor::new(&shape, out)
}
