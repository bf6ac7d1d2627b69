use super::DistillSign;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Graph, Tensor, Var};

/// Number of leading non-patch tokens (class and distillation).
pub const N_PREFIX: usize = 2;

/// Mean over tokens of a `[B, L, D]` hidden state, giving `[B, D]`.
pub fn pool_tokens(h: &Tensor) -> Result<Tensor> {
    let s = h.shape();
    if s.len() != 3 {
        return Err(shape_err!("expected [B, L, D], got {s:?}"));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; b * d];
    for bi in 0..b {
        for t in 0..l {
            for j in 0..d {
                out[bi * d + j] += h.data()[(bi * l + t) * d + j];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= l as f64);
    Tensor::new(&[b, d], out)
}

/// Averages consecutive groups of `[B, Dt]` columns down to `d` columns.
pub fn group_average(t: &Tensor, d: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 2 || d == 0 || !s[1].is_multiple_of(d) {
        return Err(shape_err!("cannot reduce {s:?} to width {d}"));
    }
    let r = s[1] / d;
    let out: Vec<f64> = t.data().chunks(r).map(|c| c.iter().sum::<f64>() / r as f64).collect();
    Tensor::new(&[s[0], d], out)
}

/// Mean attention probability from the distillation token (row 1) onto the
/// patch tokens, averaged over batch and heads. `attn` is `[B, H, L, L]`.
pub fn dist_token_attention(attn: &Tensor) -> Result<f64> {
    let s = attn.shape();
    if s.len() != 4 || s[2] != s[3] || s[2] <= N_PREFIX {
        return Err(shape_err!("expected [B, H, L, L] with L > {N_PREFIX}, got {s:?}"));
    }
    let l = s[2];
    let rows = s[0] * s[1];
    let mut total = 0.0;
    for r in 0..rows {
        let row = &attn.data()[(r * l + 1) * l..(r * l + 2) * l];
        total += row[N_PREFIX..].iter().sum::<f64>() / (l - N_PREFIX) as f64;
    }
    Ok(total / rows as f64)
}

/// Student-side inputs of the distillation objective.
pub struct StudentStates<'a> {
    pub cls_logits: Var,
    /// Per-layer hidden states `[B, L, D]`.
    pub hidden: &'a [Var],
    /// Per-layer attention probabilities `[B, H, L, L]`.
    pub attn: &'a [Var],
}

/// `alpha * CE + beta * sum_i (1 - sim_i) q_i` (or `sim_i q_i` for the
/// literal sign), where `sim_i` is the batch-mean cosine similarity between
/// token-pooled student layer `i` and its teacher layer and `q_i` the
/// (constant) distillation-token attention of student layer `i`.
///
/// `teacher_pooled` holds one `[B, Dt]` tensor per teacher layer; teacher
/// layers map uniformly onto student layers and teacher widths are
/// group-averaged down to the student width. With `beta == 0` the result is
/// exactly `alpha * CE` and the teacher is not consulted.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss(
    g: &mut Graph,
    student: &StudentStates,
    labels: &[usize],
    teacher_pooled: Option<&[Tensor]>,
    alpha: f64,
    beta: f64,
    sign: DistillSign,
) -> Result<Var> {
    let ce = g.cross_entropy(student.cls_logits, labels)?;
    let cls_term = g.affine(ce, alpha, 0.0)?;
    if beta == 0.0 {
        return Ok(cls_term);
    }
    let teacher = teacher_pooled.ok_or_else(|| invalid!("beta > 0 requires teacher states"))?;
    let ls = student.hidden.len();
    if ls == 0 || student.attn.len() != ls || teacher.is_empty() || teacher.len() % ls != 0 {
        return Err(invalid!(
            "layer-count mismatch: {} teacher layers for {ls} student layers",
            teacher.len()
        ));
    }
    let stride = teacher.len() / ls;
    let mut acc: Option<Var> = None;
    let mut q_sum = 0.0;
    for i in 0..ls {
        let h = student.hidden[i];
        let d = *g.shape(h).last().unwrap();
        let pooled = g.mean_axis(h, 1)?;
        let t = group_average(&teacher[(i + 1) * stride - 1], d)?;
        let tv = g.constant(t);
        let cos = g.cosine_rows(pooled, tv)?;
        let sim = g.mean_axis(cos, 0)?;
        let q = dist_token_attention(g.value(student.attn[i]))?;
        q_sum += q;
        let w = match sign {
            DistillSign::Agreement => -q,
            DistillSign::Literal => q,
        };
        let term = g.dot_const(sim, &[w])?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let shift = match sign {
        DistillSign::Agreement => beta * q_sum,
        DistillSign::Literal => 0.0,
    };
    let sim_term = g.affine(acc.expect("at least one layer"), beta, shift)?;
    g.add(cls_term, sim_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Precision;

    #[test]
    fn helpers() {
        let h = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(pool_tokens(&h).unwrap().data(), &[2.0, 4.0]);
        let t = Tensor::new(&[1, 4], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(group_average(&t, 2).unwrap().data(), &[2.0, 6.0]);
        assert!(group_average(&t, 3).is_err());
    }

    #[test]
    fn beta_zero_is_scaled_cross_entropy() {
        let mut g = Graph::new(Precision::F64);
        let logits = g.constant(Tensor::new(&[2, 3], vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap());
        let ce = g.cross_entropy(logits, &[1, 2]).unwrap();
        let s = StudentStates {
            cls_logits: logits,
            hidden: &[],
            attn: &[],
        };
        let l = distill_loss(&mut g, &s, &[1, 2], None, 0.7, 0.0, DistillSign::Agreement).unwrap();
        assert_eq!(g.value(l).item(), 0.7 * g.value(ce).item());
        assert!(distill_loss(&mut g, &s, &[1, 2], None, 1.0, 0.5, DistillSign::Agreement).is_err());
    }
}
