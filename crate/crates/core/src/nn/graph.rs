//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar output with respect to every node that requires
//! one. A fresh graph is built for each forward pass.

use rand::Rng as _;

use super::bicubic::{axis_taps, resize_backward, resize_forward, Taps};
use super::conv::{self, ConvDims};
use super::fftconv::{conv_fft, prefer_fft};
use super::gemm::{gemm, Precision, Strides};
use super::tensor::split_at_axis;
use super::Tensor;
use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Temporal padding of [`Graph::conv_temporal`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output length equals input length; the extra pad for even widths goes right.
    Same,
}

/// Running statistics of a batch-norm layer, updated in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddBcast(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        fin: usize,
        fout: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    ExpandBatch(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Elu(Var),
    Gelu(Var),
    AvgPool(Var, usize),
    Dropout(Var, Vec<f64>),
    Bicubic {
        x: Var,
        rows: Vec<Taps>,
        cols: Vec<Taps>,
    },
    MinMax {
        x: Var,
        arg: Vec<(usize, usize, f64)>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    MeanAxis(Var, usize),
    SumAll(Var),
    DotConst(Var, Vec<f64>),
    CrossEntropy {
        x: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    CosineRows(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBcast(..) => "add_bcast",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::ExpandBatch(..) => "expand_batch",
            Op::Conv { .. } => "conv_temporal",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Elu(..) => "elu",
            Op::Gelu(..) => "gelu",
            Op::AvgPool(..) => "avg_pool",
            Op::Dropout(..) => "dropout",
            Op::Bicubic { .. } => "bicubic",
            Op::MinMax { .. } => "scale_0_255",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::MeanAxis(..) => "mean_axis",
            Op::SumAll(..) => "sum_all",
            Op::DotConst(..) => "dot_const",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::CosineRows(..) => "cosine_rows",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a trainable parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{} produced a non-finite value", op.name())));
        }
        let requires_grad = parents.iter().any(|&p| self.rg(p));
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), v)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (repeated over leading axes).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err!("add_bcast: {sb:?} is not a suffix of {sa:?}"));
        }
        let bd = self.data(b);
        let inner = bd.len();
        let v: Vec<f64> = self.data(a).iter().enumerate().map(|(i, x)| x + bd[i % inner]).collect();
        let t = Tensor::new(self.shape(a), v)?;
        self.push(t, Op::AddBcast(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a), v)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let v: Vec<f64> = self.data(x).iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(self.shape(x), v)?;
        self.push(t, Op::Affine(x, scale), &[x])
    }

    /// `x[.., in] W[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[1] {
            return Err(shape_err!("linear: input {sx:?} vs weight {sw:?}"));
        }
        let (fout, fin) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err!("linear: bias {:?} for {fout} outputs", self.shape(b)));
            }
        }
        let n = self.data(x).len() / fin.max(1);
        let mut out = vec![0.0; n * fout];
        if let Some(b) = b {
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(self.data(b));
            }
        }
        gemm(
            self.precision,
            n,
            fin,
            fout,
            1.0,
            self.data(x),
            Strides::row_major(fin),
            self.data(w),
            Strides::transposed(fin),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
            Strides::row_major(fout),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = fout;
        let t = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(t, Op::Linear { x, w, b, n, fin, fout }, &parents)
    }

    /// Batched product over the leading axes: `a[.., m, k] b[.., k, n]`, or
    /// `a b^T` with `b[.., n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err!("matmul: {sa:?} vs {sb:?}"));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(shape_err!("matmul inner extents: {sa:?} vs {sb:?}"));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let sbs = if trans_b { Strides::transposed(k) } else { Strides::row_major(n) };
        for i in 0..batch {
            gemm(
                self.precision,
                m,
                k,
                n,
                1.0,
                &self.data(a)[i * m * k..(i + 1) * m * k],
                Strides::row_major(k),
                &self.data(b)[i * k * n..(i + 1) * k * n],
                sbs,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
                Strides::row_major(n),
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let t = Tensor::new(&shape, out)?;
        self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("permute {perm:?} invalid for {s:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let v = permute_data(self.data(x), &s, perm);
        let t = Tensor::new(&out_shape, v)?;
        self.push(t, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| invalid!("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(shape_err!("concat: {s:?} vs {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let e = self.shape(x)[axis];
                out.extend_from_slice(&self.data(x)[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err!("narrow {start}+{len} on axis {axis} of {s:?}"));
        }
        let (outer, e, inner) = split_at_axis(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * e + start) * inner;
            out.extend_from_slice(&self.data(x)[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Narrow { x, axis, start }, &[x])
    }

    /// Repeats a tensor with leading extent 1 `n` times along that axis.
    pub fn expand_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.first() != Some(&1) {
            return Err(shape_err!("expand_batch needs leading extent 1, got {s:?}"));
        }
        let v = self.data(x).repeat(n);
        let mut shape = s;
        shape[0] = n;
        let t = Tensor::new(&shape, v)?;
        self.push(t, Op::ExpandBatch(x), &[x])
    }

    /// Convolution along time: `x[B, Cin, K, T]` with kernels `w[Cout, Cin, 1, W]`
    /// gives `[B, Cout, K, T']`; every row `k` is filtered identically.
    pub fn conv_temporal(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != 1 || sw[1] != sx[1] {
            return Err(shape_err!("conv_temporal: input {sx:?} vs kernels {sw:?}"));
        }
        let (bsz, cin, k, t) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, width) = (sw[0], sw[3]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv bias {:?} for {cout} kernels", self.shape(b)));
            }
        }
        let (pad, tout) = match padding {
            Padding::Valid => {
                if width > t || width == 0 {
                    return Err(invalid!("kernel width {width} exceeds input length {t}"));
                }
                (0, t - width + 1)
            }
            Padding::Same => {
                if width == 0 || width > 2 * t {
                    return Err(invalid!("kernel width {width} exceeds padded length"));
                }
                ((width - 1) / 2, t)
            }
        };
        let xd = self.data(x);
        let dims = ConvDims {
            bsz,
            cin,
            k,
            t,
            cout,
            width,
            pad,
            tout,
        };
        let mut out = if prefer_fft(cin, cout, width, tout) {
            conv_fft(self.precision, xd, self.data(w), (bsz, cin, k, t), (cout, width), pad, tout)
        } else {
            conv::forward(self.precision, xd, self.data(w), &dims)
        };
        if let Some(b) = b {
            let bd = self.data(b);
            for (i, chunk) in out.chunks_mut(k * tout).enumerate() {
                let c = i % cout;
                chunk.iter_mut().for_each(|v| *v += bd[c]);
            }
        }
        let t = Tensor::new(&[bsz, cout, k, tout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(t, Op::Conv { x, w, b, pad }, &parents)
    }

    /// Batch normalization over axis 1 of `x[B, C, ...]`. In training mode the
    /// batch statistics normalize and update `stats`; otherwise `stats` is used.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut BnStats, train: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err!("batch_norm needs [B, C, ..], got {s:?}"));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err!("batch_norm parameters do not match {c} channels"));
        }
        let (outer, _, inner) = split_at_axis(&s, 1);
        let cnt = outer * inner;
        let xd = self.data(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for o in 0..outer {
                for (ci, m) in mean.iter_mut().enumerate() {
                    let base = (o * c + ci) * inner;
                    *m += xd[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= cnt as f64);
            for o in 0..outer {
                for ci in 0..c {
                    let base = (o * c + ci) * inner;
                    var[ci] += xd[base..base + inner].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= cnt as f64);
            for ci in 0..c {
                let unbiased = if cnt > 1 {
                    var[ci] * cnt as f64 / (cnt - 1) as f64
                } else {
                    var[ci]
                };
                stats.mean[ci] = (1.0 - BN_MOMENTUM) * stats.mean[ci] + BN_MOMENTUM * mean[ci];
                stats.var[ci] = (1.0 - BN_MOMENTUM) * stats.var[ci] + BN_MOMENTUM * unbiased;
            }
        } else {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for ci in 0..c {
                let base = (o * c + ci) * inner;
                let (k, m) = (g[ci] * inv_std[ci], bt[ci] - g[ci] * inv_std[ci] * mean[ci]);
                for (y, &v) in out[base..base + inner].iter_mut().zip(&xd[base..base + inner]) {
                    *y = k * v + m;
                }
            }
        }
        let t = Tensor::new(&s, out)?;
        self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    /// Exponential linear unit with unit alpha.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let v: Vec<f64> = self.data(x).iter().map(|&v| if v > 0.0 { v } else { v.exp_m1() }).collect();
        let t = Tensor::new(self.shape(x), v)?;
        self.push(t, Op::Elu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v: Vec<f64> = self.data(x).iter().map(|&v| gelu(v).0).collect();
        let t = Tensor::new(self.shape(x), v)?;
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Non-overlapping mean pooling of width `p` along the last axis.
    pub fn avg_pool_temporal(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let t = *s.last().ok_or_else(|| shape_err!("avg_pool on a scalar"))?;
        if p == 0 || p > t {
            return Err(invalid!("pool width {p} exceeds length {t}"));
        }
        let tout = (t - p) / p + 1;
        let rows = self.data(x).len() / t;
        let mut out = Vec::with_capacity(rows * tout);
        for r in 0..rows {
            let row = &self.data(x)[r * t..(r + 1) * t];
            for j in 0..tout {
                out.push(row[j * p..(j + 1) * p].iter().sum::<f64>() / p as f64);
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = tout;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::AvgPool(x, p), &[x])
    }

    /// Inverted dropout; `rng = None` (evaluation) is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid!("dropout probability {p} outside [0, 1)"));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v: Vec<f64> = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(self.shape(x), v)?;
        self.push(t, Op::Dropout(x, mask), &[x])
    }

    /// Bicubic resize of the last two axes.
    pub fn bicubic(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let nd = s.len();
        if nd < 2 || s[nd - 2] < 2 || s[nd - 1] < 2 {
            return Err(invalid!("bicubic source must be at least 2x2, got {s:?}"));
        }
        if out_h == 0 || out_w == 0 {
            return Err(invalid!("output dimensions must be >= 1"));
        }
        let (h, w) = (s[nd - 2], s[nd - 1]);
        let rows = axis_taps(h, out_h);
        let cols = axis_taps(w, out_w);
        let v = resize_forward(self.data(x), h, w, &rows, &cols);
        let mut shape = s;
        shape[nd - 2] = out_h;
        shape[nd - 1] = out_w;
        let t = Tensor::new(&shape, v)?;
        self.push(t, Op::Bicubic { x, rows, cols }, &[x])
    }

    /// Per-plane affine map of `[min, max]` onto `[0, 255]` over the last two
    /// axes. A constant plane maps to 127.5.
    pub fn scale_0_255(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err!("scale_0_255 needs at least 2 axes, got {s:?}"));
        }
        let plane = s[s.len() - 2] * s[s.len() - 1];
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        let mut arg = Vec::new();
        for (p, chunk) in xd.chunks(plane.max(1)).enumerate() {
            let (mut lo, mut hi) = (0, 0);
            for (i, &v) in chunk.iter().enumerate() {
                if v < chunk[lo] {
                    lo = i;
                }
                if v > chunk[hi] {
                    hi = i;
                }
            }
            let range = chunk[hi] - chunk[lo];
            let dst = &mut out[p * plane..p * plane + chunk.len()];
            if range > 0.0 {
                for (d, &v) in dst.iter_mut().zip(chunk) {
                    *d = 255.0 * (v - chunk[lo]) / range;
                }
            } else {
                dst.iter_mut().for_each(|d| *d = 127.5);
            }
            arg.push((lo, hi, range));
        }
        let t = Tensor::new(&s, out)?;
        self.push(t, Op::MinMax { x, arg }, &[x])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!("layer_norm parameters do not match width {d}"));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(xd.len() / d);
        for (r, row) in xd.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(&s, out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| shape_err!("softmax on a scalar"))?;
        let mut out = self.data(x).to_vec();
        out.chunks_mut(d).for_each(softmax_in_place);
        let t = Tensor::new(&s, out)?;
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err!("mean axis {axis} out of range for {s:?}"));
        }
        let (outer, e, inner) = split_at_axis(&s, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..e {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * e + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= e as f64);
        let mut shape = s;
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::MeanAxis(x, axis), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.data(x).iter().sum());
        self.push(t, Op::SumAll(x), &[x])
    }

    /// `sum_i w_i x_i` with constant weights.
    pub fn dot_const(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.data(x).len() {
            return Err(shape_err!("dot_const: {} weights for {:?}", w.len(), self.shape(x)));
        }
        let t = Tensor::scalar(self.data(x).iter().zip(w).map(|(a, b)| a * b).sum());
        self.push(t, Op::DotConst(x, w.to_vec()), &[x])
    }

    /// Mean cross-entropy of `logits[B, C]` against integer labels.
    pub fn cross_entropy(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err!("cross_entropy: logits {s:?} for {} labels", labels.len()));
        }
        let c = s[1];
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid!("label {l} out of range for {c} classes"));
        }
        let mut probs = self.data(x).to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            softmax_in_place(row);
        }
        let t = Tensor::scalar(loss / labels.len() as f64);
        self.push(
            t,
            Op::CrossEntropy {
                x,
                labels: labels.to_vec(),
                probs,
            },
            &[x],
        )
    }

    /// Cosine similarity of matching rows of `a[N, D]` and `b[N, D]`, shape `[N]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_rows")?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("cosine_rows needs [N, D], got {s:?}"));
        }
        let d = s[1];
        let out: Vec<f64> = self
            .data(a)
            .chunks(d)
            .zip(self.data(b).chunks(d))
            .map(|(x, y)| cosine(x, y).0)
            .collect();
        let t = Tensor::new(&[s[0]], out)?;
        self.push(t, Op::CosineRows(a, b), &[a, b])
    }

    /// Gradients of the scalar `out` with respect to every node on its path.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.value(out).numel() != 1 {
            return Err(shape_err!("backward needs a scalar output, got {:?}", self.shape(out)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads(grads))
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.data(v).len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddBcast(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    let n = d.len();
                    for (i, v) in g.iter().enumerate() {
                        d[i % n] += v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(bd).for_each(|((d, g), y)| *d += g * y));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(ad).for_each(|((d, g), x)| *d += g * x));
            }
            Op::Affine(x, s) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)),
            Op::Linear { x, w, b, n, fin, fout } => {
                let (n, fin, fout) = (*n, *fin, *fout);
                let p = self.precision;
                let wd = self.data(*w);
                let xd = self.data(*x);
                acc(*x, &mut |d| {
                    // dx = g W
                    gemm(
                        p,
                        n,
                        fout,
                        fin,
                        1.0,
                        g,
                        Strides::row_major(fout),
                        wd,
                        Strides::row_major(fin),
                        1.0,
                        d,
                        Strides::row_major(fin),
                    );
                });
                acc(*w, &mut |d| {
                    // dW = g^T x
                    gemm(
                        p,
                        fout,
                        n,
                        fin,
                        1.0,
                        g,
                        Strides::transposed(fout),
                        xd,
                        Strides::row_major(fin),
                        1.0,
                        d,
                        Strides::row_major(fin),
                    );
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(fout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let p = self.precision;
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for i in 0..*batch {
                        // dA = G B^T   (B stored [k,n]) or G B (B stored [n,k])
                        let sb = if *trans_b { Strides::row_major(k) } else { Strides::transposed(n) };
                        gemm(
                            p,
                            m,
                            n,
                            k,
                            1.0,
                            &g[i * m * n..(i + 1) * m * n],
                            Strides::row_major(n),
                            &bd[i * k * n..(i + 1) * k * n],
                            sb,
                            1.0,
                            &mut d[i * m * k..(i + 1) * m * k],
                            Strides::row_major(k),
                        );
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..*batch {
                        let ga = &g[i * m * n..(i + 1) * m * n];
                        let aa = &ad[i * m * k..(i + 1) * m * k];
                        let db = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = G^T A
                            gemm(
                                p,
                                n,
                                m,
                                k,
                                1.0,
                                ga,
                                Strides::transposed(n),
                                aa,
                                Strides::row_major(k),
                                1.0,
                                db,
                                Strides::row_major(k),
                            );
                        } else {
                            // dB[k,n] = A^T G
                            gemm(
                                p,
                                k,
                                m,
                                n,
                                1.0,
                                aa,
                                Strides::transposed(k),
                                ga,
                                Strides::row_major(n),
                                1.0,
                                db,
                                Strides::row_major(n),
                            );
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Permute(x, perm) => {
                let out_shape = node.value.shape();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, out_shape, &inv);
                acc(*x, &mut |d| add_into(d, &back));
            }
            Op::Concat(xs, axis) => {
                let s = node.value.shape();
                let (outer, total, inner) = split_at_axis(s, *axis);
                let mut off = 0;
                for &x in xs {
                    let e = self.shape(x)[*axis];
                    acc(x, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + e) * inner];
                            add_into(&mut d[o * e * inner..(o + 1) * e * inner], src);
                        }
                    });
                    off += e;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, e, inner) = split_at_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let base = (o * e + start) * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::ExpandBatch(x) => acc(*x, &mut |d| {
                for chunk in g.chunks(d.len()) {
                    add_into(d, chunk);
                }
            }),
            Op::Conv { x, w, b, pad } => self.conv_backward(node, *x, *w, *b, *pad, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let xd = self.data(*x);
                let c = s[1];
                let (outer, _, inner) = split_at_axis(s, 1);
                let cnt = (outer * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ci in 0..c {
                        let r = (o * c + ci) * inner..(o * c + ci + 1) * inner;
                        let (sg, sgx) = sums(&g[r.clone()], &xd[r]);
                        sum_g[ci] += sg;
                        sum_gx[ci] += sgx;
                    }
                }
                // sum_gx over xhat from the raw sums
                for ci in 0..c {
                    sum_gx[ci] = (sum_gx[ci] - mean[ci] * sum_g[ci]) * inv_std[ci];
                }
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                acc(*beta, &mut |d| add_into(d, &sum_g));
                let gm = self.data(*gamma);
                acc(*x, &mut |d| {
                    for ci in 0..c {
                        // d += k g + p x + q
                        let k = gm[ci] * inv_std[ci];
                        let (p, q) = if *train {
                            let p = -k * inv_std[ci] * sum_gx[ci] / cnt;
                            (p, -k * sum_g[ci] / cnt - p * mean[ci])
                        } else {
                            (0.0, 0.0)
                        };
                        for o in 0..outer {
                            let r = (o * c + ci) * inner..(o * c + ci + 1) * inner;
                            for ((d, &gv), &xv) in d[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xd[r]) {
                                *d += k * gv + p * xv + q;
                            }
                        }
                    }
                });
            }
            Op::Elu(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += if y[i] > 0.0 { g[i] } else { g[i] * (y[i] + 1.0) };
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu(xd[i]).1;
                    }
                });
            }
            Op::AvgPool(x, p) => {
                let t = *self.shape(*x).last().unwrap();
                let tout = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for (r, row) in g.chunks(tout).enumerate() {
                        for (j, &v) in row.iter().enumerate() {
                            let base = r * t + j * p;
                            d[base..base + p].iter_mut().for_each(|d| *d += v / *p as f64);
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => acc(*x, &mut |d| d.iter_mut().zip(g).zip(mask).for_each(|((d, g), m)| *d += g * m)),
            Op::Bicubic { x, rows, cols } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let back = resize_backward(g, h, w, rows, cols);
                acc(*x, &mut |d| add_into(d, &back));
            }
            Op::MinMax { x, arg } => {
                let s = self.shape(*x);
                let plane = s[s.len() - 2] * s[s.len() - 1];
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for (p, &(lo, hi, range)) in arg.iter().enumerate() {
                        if range <= 0.0 {
                            continue;
                        }
                        let base = p * plane;
                        let (mut dmax, mut dmin) = (0.0, 0.0);
                        for i in base..base + plane {
                            d[i] += g[i] * 255.0 / range;
                            dmax -= g[i] * y[i] / range;
                            dmin += g[i] * (y[i] - 255.0) / range;
                        }
                        d[base + hi] += dmax;
                        d[base + lo] += dmin;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let dw = self.shape(*gamma)[0];
                let gm = self.data(*gamma);
                acc(*gamma, &mut |d| {
                    for (gr, hr) in g.chunks(dw).zip(xhat.chunks(dw)) {
                        for j in 0..dw {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(dw) {
                        add_into(d, gr);
                    }
                });
                acc(*x, &mut |d| {
                    for (r, (gr, hr)) in g.chunks(dw).zip(xhat.chunks(dw)).enumerate() {
                        let gh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let m1 = gh.iter().sum::<f64>() / dw as f64;
                        let m2 = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / dw as f64;
                        for j in 0..dw {
                            d[r * dw + j] += inv_std[r] * (gh[j] - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dlast = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(dlast).zip(g.chunks(dlast)).zip(y.chunks(dlast)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..dlast {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::MeanAxis(x, axis) => {
                let (outer, e, inner) = split_at_axis(self.shape(*x), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for j in 0..e {
                            for i in 0..inner {
                                d[(o * e + j) * inner + i] += g[o * inner + i] / e as f64;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::DotConst(x, w) => acc(*x, &mut |d| d.iter_mut().zip(w).for_each(|(d, w)| *d += g[0] * w)),
            Op::CrossEntropy { x, labels, probs } => {
                let c = self.shape(*x)[1];
                let scale = g[0] / labels.len() as f64;
                acc(*x, &mut |d| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            d[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::CosineRows(a, b) => {
                let dw = self.shape(*a)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut one_side = |u: Var, ud: &[f64], vd: &[f64]| {
                    acc(u, &mut |d| {
                        for (r, gr) in g.iter().enumerate() {
                            let (uu, vv) = (&ud[r * dw..(r + 1) * dw], &vd[r * dw..(r + 1) * dw]);
                            let (cos, nu, nv) = cosine(uu, vv);
                            if nu == 0.0 || nv == 0.0 {
                                continue;
                            }
                            for j in 0..dw {
                                d[r * dw + j] += gr * (vv[j] / (nu * nv) - cos * uu[j] / (nu * nu));
                            }
                        }
                    });
                };
                one_side(*a, ad, bd);
                one_side(*b, bd, ad);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(&self, node: &Node, x: Var, w: Var, b: Option<Var>, pad: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sx = self.shape(x);
        let (bsz, cin, k, t) = (sx[0], sx[1], sx[2], sx[3]);
        let sw = self.shape(w);
        let (cout, width) = (sw[0], sw[3]);
        let tout = node.value.shape()[3];
        let dims = ConvDims {
            bsz,
            cin,
            k,
            t,
            cout,
            width,
            pad,
            tout,
        };
        let (dx, dw) = conv::backward(self.precision, self.data(x), self.data(w), g, &dims, self.rg(x), self.rg(w));
        for (v, d) in [(Some(x), dx), (Some(w), dw)] {
            if let (Some(v), Some(d)) = (v, d) {
                add_into(grads[v.0].get_or_insert_with(|| vec![0.0; d.len()]), &d);
            }
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let slot = grads[b.0].get_or_insert_with(|| vec![0.0; cout]);
            for (i, chunk) in g.chunks(k * tout).enumerate() {
                slot[i % cout] += chunk.iter().sum::<f64>();
            }
        }
    }
}

/// `(sum g, sum g x)` with independent partial sums.
fn sums(g: &[f64], x: &[f64]) -> (f64, f64) {
    let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
    let (gc, xc) = (g.chunks_exact(4), x.chunks_exact(4));
    let (gr, xr) = (gc.remainder(), xc.remainder());
    for (gv, xv) in gc.zip(xc) {
        for j in 0..4 {
            a[j] += gv[j];
            b[j] += gv[j] * xv[j];
        }
    }
    let tail = gr.iter().zip(xr).fold((0.0, 0.0), |(s, t), (&gv, &xv)| (s + gv, t + gv * xv));
    (a.iter().sum::<f64>() + tail.0, b.iter().sum::<f64>() + tail.1)
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + th), 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
}

/// (cosine, |u|, |v|); zero vectors give cosine 0.
fn cosine(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        (0.0, nu, nv)
    } else {
        (dot / (nu * nv), nu, nv)
    }
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
