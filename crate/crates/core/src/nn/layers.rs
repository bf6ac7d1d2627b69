//! Transformer building blocks composed from graph primitives.

use super::{Graph, Var};
use crate::error::{invalid, Result};

/// Parameters of one pre-norm encoder block, bound on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    /// `[3D, D]`, rows ordered q, k, v; heads are contiguous slices of each.
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Multi-head scaled dot-product self-attention over `x[B, L, D]`.
///
/// Returns the projected output `[B, L, D]` and the attention probabilities
/// `[B, H, L, L]`.
pub fn self_attention(g: &mut Graph, x: Var, heads: usize, qkv_w: Var, qkv_b: Var, proj_w: Var, proj_b: Var) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(invalid!("width {d} not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let qkv = g.linear(x, qkv_w, Some(qkv_b))?;
    let qkv = g.reshape(qkv, &[b, l, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [x; 3];
    for (i, p) in parts.iter_mut().enumerate() {
        let t = g.narrow(qkv, 0, i, 1)?;
        *p = g.reshape(t, &[b * heads, l, dh])?;
    }
    let [q, k, v] = parts;
    let scores = g.matmul(q, k, true)?;
    let scores = g.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0)?;
    let attn = g.softmax(scores)?;
    let ctx = g.matmul(attn, v, false)?;
    let ctx = g.reshape(ctx, &[b, heads, l, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, l, d])?;
    let out = g.linear(ctx, proj_w, Some(proj_b))?;
    let probs = g.reshape(attn, &[b, heads, l, l])?;
    Ok((out, probs))
}

/// `x + attn(ln1(x))` then `+ mlp(ln2(.))` with a GELU hidden layer.
pub fn encoder_block(g: &mut Graph, x: Var, heads: usize, p: &BlockVars) -> Result<(Var, Var)> {
    let h = g.layer_norm(x, p.ln1_g, p.ln1_b)?;
    let (a, probs) = self_attention(g, h, heads, p.qkv_w, p.qkv_b, p.proj_w, p.proj_b)?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, p.ln2_g, p.ln2_b)?;
    let h = g.linear(h, p.fc1_w, Some(p.fc1_b))?;
    let h = g.gelu(h)?;
    let h = g.linear(h, p.fc2_w, Some(p.fc2_b))?;
    let out = g.add(x, h)?;
    Ok((out, probs))
}
