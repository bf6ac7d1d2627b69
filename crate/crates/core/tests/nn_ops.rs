use fcdn_core::nn::*;
use fcdn_core::rng;
use fcdn_core::Result;
use rand::Rng as _;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Reduces any node to a scalar with fixed, irregular weights.
fn reduce(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.value(v).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7371).sin()).collect();
    g.dot_const(v, &w)
}

fn check<F>(params: Vec<Tensor>, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let vars: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let out = reduce(&mut g, out)?;
        Ok(g.value(out).item())
    };
    let analytic = |ps: &[Tensor]| -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(Precision::F64);
        let vars: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let out = reduce(&mut g, out)?;
        let grads = g.backward(out)?;
        Ok(vars
            .iter()
            .zip(ps)
            .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect())
    };
    let opts = GradCheckOptions {
        max_coords: 40,
        ..Default::default()
    };
    let rep = grad_check(&params, eval, analytic, opts).unwrap();
    rep.max_rel_err
}

const TOL: f64 = 1e-4;

// ---------------------------------------------------------------- conv

fn conv_oracle(x: &Tensor, w: &Tensor, pad: usize, tout: usize) -> Vec<f64> {
    let (b, cin, k, t) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, width) = (w.shape()[0], w.shape()[3]);
    let mut out = vec![0.0; b * cout * k * tout];
    for bi in 0..b {
        for co in 0..cout {
            for ki in 0..k {
                for j in 0..tout {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for wi in 0..width {
                            let src = j as isize + wi as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                acc += w.data()[(co * cin + ci) * width + wi] * x.data()[((bi * cin + ci) * k + ki) * t + src as usize];
                            }
                        }
                    }
                    out[((bi * cout + co) * k + ki) * tout + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let x = rand_tensor(&[1, 1, 3, 7], 1);
    let w = rand_tensor(&[2, 1, 1, 2], 2);
    let mut g = Graph::new(Precision::F64);
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv_temporal(xv, wv, None, Padding::Valid).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 3, 6]);
    let want = conv_oracle(&x, &w, 0, 6);
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6);
    }
    // same padding, even width
    let x = rand_tensor(&[2, 3, 2, 9], 3);
    let w = rand_tensor(&[4, 3, 1, 4], 4);
    let mut g = Graph::new(Precision::F32);
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv_temporal(xv, wv, None, Padding::Same).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 2, 9]);
    let want = conv_oracle(&x, &w, 1, 9);
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn wide_conv_matches_oracle_and_gradient() {
    // large enough to be evaluated in the frequency domain
    let x = rand_tensor(&[1, 32, 2, 540], 31);
    let w = rand_tensor(&[32, 32, 1, 41], 32);
    let b = rand_tensor(&[32], 33);
    for (padding, pad, tout) in [(Padding::Valid, 0, 500), (Padding::Same, 20, 540)] {
        let mut g = Graph::new(Precision::F64);
        let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
        let bv = g.constant(b.clone());
        let y = g.conv_temporal(xv, wv, Some(bv), padding).unwrap();
        let mut want = conv_oracle(&x, &w, pad, tout);
        for (i, v) in want.iter_mut().enumerate() {
            *v += b.data()[(i / (2 * tout)) % 32];
        }
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let e = check(vec![x.clone(), w.clone()], |g, v| g.conv_temporal(v[0], v[1], None, padding));
        assert!(e < TOL, "{padding:?}: {e}");
    }
}

#[test]
fn conv_identity_kernel() {
    let x = rand_tensor(&[1, 1, 4, 10], 5);
    let mut g = Graph::new(Precision::F64);
    let xv = g.constant(x.clone());
    let wv = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv_temporal(xv, wv, None, Padding::Valid).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_reference_first_layer_shape() {
    let mut g = Graph::new(Precision::F32);
    let xv = g.constant(Tensor::zeros(&[1, 1, 64, 1000]));
    let wv = g.constant(Tensor::zeros(&[40, 1, 1, 20]));
    let y = g.conv_temporal(xv, wv, None, Padding::Valid).unwrap();
    assert_eq!(g.shape(y), &[1, 40, 64, 981]);
}

#[test]
fn conv_errors() {
    let mut g = Graph::new(Precision::F64);
    let xv = g.constant(Tensor::zeros(&[1, 2, 3, 5]));
    let bad_cin = g.constant(Tensor::zeros(&[1, 3, 1, 2]));
    assert!(g.conv_temporal(xv, bad_cin, None, Padding::Valid).is_err());
    let too_wide = g.constant(Tensor::zeros(&[1, 2, 1, 6]));
    assert!(g.conv_temporal(xv, too_wide, None, Padding::Valid).is_err());
}

#[test]
fn conv_gradients() {
    for padding in [Padding::Valid, Padding::Same] {
        let e = check(
            vec![rand_tensor(&[2, 2, 3, 8], 6), rand_tensor(&[3, 2, 1, 4], 7), rand_tensor(&[3], 8)],
            |g, v| g.conv_temporal(v[0], v[1], Some(v[2]), padding),
        );
        assert!(e < TOL, "{padding:?}: {e}");
    }
}

// ---------------------------------------------------------------- batch norm

#[test]
fn batch_norm_training_standardizes() {
    let x = rand_tensor(&[4, 3, 2, 5], 9);
    let mut g = Graph::new(Precision::F64);
    let xv = g.constant(x.clone());
    let gm = g.constant(Tensor::full(&[3], 1.0));
    let bt = g.constant(Tensor::zeros(&[3]));
    let mut stats = BnStats::new(3);
    let y = g.batch_norm(xv, gm, bt, &mut stats, true).unwrap();
    let yd = g.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..10).map(move |i| (b * 3 + c) * 10 + i))
            .map(|i| yd[i])
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4, "{v}");
    }
    // running stats moved toward the batch statistics
    assert!(stats.mean.iter().all(|m| m.abs() > 0.0));
}

#[test]
fn batch_norm_constant_input_gives_beta() {
    let mut g = Graph::new(Precision::F64);
    let xv = g.constant(Tensor::full(&[1, 2, 1, 4], 3.0));
    let gm = g.constant(Tensor::full(&[2], 2.0));
    let bt = g.constant(Tensor::new(&[2], vec![0.5, -0.25]).unwrap());
    let y = g.batch_norm(xv, gm, bt, &mut BnStats::new(2), true).unwrap();
    let yd = g.value(y).data();
    assert!(yd[..4].iter().all(|&v| v == 0.5));
    assert!(yd[4..].iter().all(|&v| v == -0.25));
}

#[test]
fn batch_norm_matches_formula_and_eval_uses_running_stats() {
    let x = rand_tensor(&[3, 2, 1, 4], 10);
    let gamma = [1.5, -0.5];
    let beta = [0.1, 0.2];
    let mut g = Graph::new(Precision::F64);
    let xv = g.constant(x.clone());
    let gm = g.constant(Tensor::new(&[2], gamma.to_vec()).unwrap());
    let bt = g.constant(Tensor::new(&[2], beta.to_vec()).unwrap());
    let mut stats = BnStats::new(2);
    let y = g.batch_norm(xv, gm, bt, &mut stats, true).unwrap();
    for c in 0..2 {
        let idx: Vec<usize> = (0..3).flat_map(|b| (0..4).map(move |i| (b * 2 + c) * 4 + i)).collect();
        let m = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / 12.0;
        let v = idx.iter().map(|&i| (x.data()[i] - m).powi(2)).sum::<f64>() / 12.0;
        for &i in &idx {
            let want = gamma[c] * (x.data()[i] - m) / (v + BN_EPS).sqrt() + beta[c];
            assert!((g.value(y).data()[i] - want).abs() < 1e-6);
        }
        assert!((stats.mean[c] - 0.1 * m).abs() < 1e-12);
        assert!((stats.var[c] - (0.9 + 0.1 * v * 12.0 / 11.0)).abs() < 1e-12);
    }
    let ye = g.batch_norm(xv, gm, bt, &mut stats.clone(), false).unwrap();
    let i = 5;
    let want = gamma[1] * (x.data()[i] - stats.mean[1]) / (stats.var[1] + BN_EPS).sqrt() + beta[1];
    assert!((g.value(ye).data()[i] - want).abs() < 1e-12);
}

#[test]
fn batch_norm_gradients() {
    for train in [true, false] {
        let e = check(
            vec![rand_tensor(&[3, 2, 2, 3], 11), rand_tensor(&[2], 12), rand_tensor(&[2], 13)],
            |g, v| {
                let mut stats = BnStats {
                    mean: vec![0.1, -0.2],
                    var: vec![0.8, 1.3],
                };
                g.batch_norm(v[0], v[1], v[2], &mut stats, train)
            },
        );
        assert!(e < TOL, "train={train}: {e}");
    }
}

// ---------------------------------------------------------------- activations, pooling, dropout

#[test]
fn elu_values_and_gradient() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap());
    let y = g.elu(x).unwrap();
    let yd = g.value(y).data();
    assert_eq!(yd[0], 0.0);
    assert_eq!(yd[1], 1.0);
    assert!((yd[2] - (-0.632_120_558_828_557_7)).abs() < 1e-12);
    let e = check(vec![rand_tensor(&[20], 14)], |g, v| g.elu(v[0]));
    assert!(e < TOL, "{e}");
}

#[test]
fn gelu_gradient() {
    let e = check(vec![rand_tensor(&[20], 15).reshape(&[4, 5]).unwrap()], |g, v| g.gelu(v[0]));
    assert!(e < TOL, "{e}");
}

#[test]
fn avg_pool_shapes_values_gradient() {
    let mut g = Graph::new(Precision::F32);
    let x = g.constant(Tensor::full(&[1, 160, 64, 962], 2.5));
    let y = g.avg_pool_temporal(x, 32).unwrap();
    assert_eq!(g.shape(y), &[1, 160, 64, 30]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));
    let z = g.avg_pool_temporal(y, 30).unwrap();
    assert_eq!(g.shape(z), &[1, 160, 64, 1]);
    assert!(g.avg_pool_temporal(z, 2).is_err());
    let e = check(vec![rand_tensor(&[2, 3, 11], 16)], |g, v| g.avg_pool_temporal(v[0], 3));
    assert!(e < TOL, "{e}");
}

#[test]
fn dropout_modes() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(Tensor::full(&[1_000_000], 1.0));
    assert_eq!(g.dropout(x, 0.5, None).unwrap(), x);
    let mut r = rng::seeded(3);
    assert_eq!(g.dropout(x, 0.0, Some(&mut r)).unwrap(), x);
    let y = g.dropout(x, 0.5, Some(&mut r)).unwrap();
    let yd = g.value(y).data();
    let kept = yd.iter().filter(|&&v| v != 0.0).count() as f64 / yd.len() as f64;
    let mean = yd.iter().sum::<f64>() / yd.len() as f64;
    assert!((kept - 0.5).abs() < 0.01);
    assert!((mean - 1.0).abs() < 0.01);
    assert!(g.dropout(x, 1.0, Some(&mut r)).is_err());
}

// ---------------------------------------------------------------- bicubic, 0-255 scaling

#[test]
fn bicubic_graph_matches_standalone_and_gradient() {
    let x = rand_tensor(&[2, 4, 5], 17);
    let mut g = Graph::new(Precision::F64);
    let xv = g.constant(x.clone());
    let y = g.bicubic(xv, 7, 3).unwrap();
    assert_eq!(g.value(y), &bicubic_resize(&x, 7, 3).unwrap());
    let e = check(vec![x], |g, v| g.bicubic(v[0], 9, 6));
    assert!(e < TOL, "{e}");
}

#[test]
fn scale_0_255_cases() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(Tensor::new(&[1, 2], vec![-1.0, 1.0]).unwrap());
    let y = g.scale_0_255(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 255.0]);
    let c = g.constant(Tensor::full(&[2, 3], 4.0));
    let y = g.scale_0_255(c).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 127.5));
    let r = rand_tensor(&[2, 3, 4], 18);
    let rv = g.constant(r.clone());
    let y = g.scale_0_255(rv).unwrap();
    for p in 0..2 {
        let src = &r.data()[p * 12..(p + 1) * 12];
        let dst = &g.value(y).data()[p * 12..(p + 1) * 12];
        let am = |s: &[f64]| s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(am(src), am(dst));
    }
    let e = check(vec![rand_tensor(&[2, 3, 4], 19)], |g, v| g.scale_0_255(v[0]));
    assert!(e < TOL, "{e}");
}

// ---------------------------------------------------------------- attention, norms, losses

#[test]
fn attention_matches_hand_formula() {
    let (l, d, h) = (3, 8, 2);
    let x = rand_tensor(&[1, l, d], 20);
    let wqkv = rand_tensor(&[3 * d, d], 21);
    let bqkv = rand_tensor(&[3 * d], 22);
    let wp = rand_tensor(&[d, d], 23);
    let bp = rand_tensor(&[d], 24);
    let mut g = Graph::new(Precision::F64);
    let vs: Vec<Var> = [&x, &wqkv, &bqkv, &wp, &bp].iter().map(|t| g.constant((*t).clone())).collect();
    let (out, probs) = self_attention(&mut g, vs[0], h, vs[1], vs[2], vs[3], vs[4]).unwrap();

    let lin = |inp: &[f64], w: &Tensor, b: &Tensor, fout: usize, fin: usize| -> Vec<f64> {
        let rows = inp.len() / fin;
        let mut o = vec![0.0; rows * fout];
        for r in 0..rows {
            for j in 0..fout {
                o[r * fout + j] = b.data()[j] + (0..fin).map(|i| inp[r * fin + i] * w.data()[j * fin + i]).sum::<f64>();
            }
        }
        o
    };
    let qkv = lin(x.data(), &wqkv, &bqkv, 3 * d, d);
    let dh = d / h;
    let mut ctx = vec![0.0; l * d];
    for hh in 0..h {
        for i in 0..l {
            let q = |t: usize, c: usize| qkv[t * 3 * d + hh * dh + c];
            let k = |t: usize, c: usize| qkv[t * 3 * d + d + hh * dh + c];
            let v = |t: usize, c: usize| qkv[t * 3 * d + 2 * d + hh * dh + c];
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..dh).map(|c| q(i, c) * k(j, c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let p: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
            for (j, pj) in p.iter().enumerate() {
                assert!((g.value(probs).data()[(hh * l + i) * l + j] - pj).abs() < 1e-9);
            }
            for c in 0..dh {
                ctx[i * d + hh * dh + c] = (0..l).map(|j| p[j] * v(j, c)).sum();
            }
        }
    }
    let want = lin(&ctx, &wp, &bp, d, d);
    for (a, b) in g.value(out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-5);
    }
    for row in g.value(probs).data().chunks(l) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(self_attention(&mut g, vs[0], 3, vs[1], vs[2], vs[3], vs[4]).is_err());
}

#[test]
fn single_token_attention_is_one() {
    let d = 4;
    let mut g = Graph::new(Precision::F64);
    let vs: Vec<Var> = [
        rand_tensor(&[2, 1, d], 1),
        rand_tensor(&[3 * d, d], 2),
        rand_tensor(&[3 * d], 3),
        rand_tensor(&[d, d], 4),
        rand_tensor(&[d], 5),
    ]
    .into_iter()
    .map(|t| g.constant(t))
    .collect();
    let (_, probs) = self_attention(&mut g, vs[0], 2, vs[1], vs[2], vs[3], vs[4]).unwrap();
    assert!(g.value(probs).data().iter().all(|&p| p == 1.0));
}

#[test]
fn encoder_block_gradient() {
    let d = 6;
    let shapes: Vec<Vec<usize>> = vec![
        vec![2, 3, d],
        vec![d],
        vec![d],
        vec![3 * d, d],
        vec![3 * d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![2 * d, d],
        vec![2 * d],
        vec![d, 2 * d],
        vec![d],
    ];
    let params: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| rand_tensor(s, 30 + i as u64)).collect();
    let e = check(params, |g, v| {
        let p = BlockVars {
            ln1_g: v[1],
            ln1_b: v[2],
            qkv_w: v[3],
            qkv_b: v[4],
            proj_w: v[5],
            proj_b: v[6],
            ln2_g: v[7],
            ln2_b: v[8],
            fc1_w: v[9],
            fc1_b: v[10],
            fc2_w: v[11],
            fc2_b: v[12],
        };
        encoder_block(g, v[0], 3, &p).map(|(o, _)| o)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn cross_entropy_cases() {
    let mut g = Graph::new(Precision::F64);
    let u = g.constant(Tensor::zeros(&[2, 4]));
    let l = g.cross_entropy(u, &[0, 3]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    let c = g.constant(Tensor::new(&[1, 3], vec![100.0, 0.0, 0.0]).unwrap());
    let l = g.cross_entropy(c, &[0]).unwrap();
    assert!(g.value(l).item() >= 0.0 && g.value(l).item() < 1e-40);
    assert!(g.cross_entropy(c, &[3]).is_err());
    let x = rand_tensor(&[2, 3], 40);
    let xv = g.constant(x.clone());
    let l = g.cross_entropy(xv, &[2, 0]).unwrap();
    let want: f64 = [(0usize, 2usize), (1, 0)]
        .iter()
        .map(|&(r, lab)| {
            let row = &x.data()[r * 3..r * 3 + 3];
            -(row[lab].exp() / row.iter().map(|v| v.exp()).sum::<f64>()).ln()
        })
        .sum::<f64>()
        / 2.0;
    assert!((g.value(l).item() - want).abs() < 1e-9);
    let e = check(vec![x], |g, v| g.cross_entropy(v[0], &[2, 0]));
    assert!(e < TOL, "{e}");
}

#[test]
fn structural_op_gradients() {
    let e = check(vec![rand_tensor(&[2, 3, 4], 50)], |g, v| g.permute(v[0], &[2, 0, 1]));
    assert!(e < TOL);
    let e = check(vec![rand_tensor(&[2, 3], 51), rand_tensor(&[2, 2], 52)], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    assert!(e < TOL);
    let e = check(vec![rand_tensor(&[2, 5, 3], 53)], |g, v| g.narrow(v[0], 1, 1, 3));
    assert!(e < TOL);
    let e = check(vec![rand_tensor(&[1, 2, 3], 54)], |g, v| g.expand_batch(v[0], 4));
    assert!(e < TOL);
    let e = check(vec![rand_tensor(&[3, 4], 55), rand_tensor(&[4], 56)], |g, v| {
        g.add_bcast(v[0], v[1])
    });
    assert!(e < TOL);
    let e = check(vec![rand_tensor(&[3, 4], 57), rand_tensor(&[3, 4], 58)], |g, v| {
        let a = g.mul(v[0], v[1])?;
        let b = g.add(a, v[0])?;
        g.affine(b, -1.5, 2.0)
    });
    assert!(e < TOL);
    let e = check(vec![rand_tensor(&[2, 3, 4], 59)], |g, v| g.mean_axis(v[0], 1));
    assert!(e < TOL);
    let e = check(vec![rand_tensor(&[2, 5], 60)], |g, v| g.softmax(v[0]));
    assert!(e < TOL);
    let e = check(
        vec![rand_tensor(&[3, 5], 61), rand_tensor(&[5], 62), rand_tensor(&[5], 63)],
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    );
    assert!(e < TOL);
    let e = check(vec![rand_tensor(&[3, 5], 64), rand_tensor(&[3, 5], 65)], |g, v| {
        g.cosine_rows(v[0], v[1])
    });
    assert!(e < TOL);
}

#[test]
fn matmul_and_linear_gradients() {
    for trans_b in [false, true] {
        let bshape = if trans_b { [2, 4, 3] } else { [2, 3, 4] };
        let e = check(vec![rand_tensor(&[2, 5, 3], 70), rand_tensor(&bshape, 71)], |g, v| {
            g.matmul(v[0], v[1], trans_b)
        });
        assert!(e < TOL, "{e}");
    }
    let e = check(
        vec![rand_tensor(&[2, 3, 4], 72), rand_tensor(&[5, 4], 73), rand_tensor(&[5], 74)],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    );
    assert!(e < TOL, "{e}");
}

#[test]
fn sum_of_squares_is_exact() {
    let theta = rand_tensor(&[10], 80);
    let f = |ps: &[Tensor]| Ok(ps[0].data().iter().map(|v| v * v).sum());
    let a = |ps: &[Tensor]| Ok(vec![ps[0].data().iter().map(|v| 2.0 * v).collect()]);
    let rep = grad_check(&[theta], f, a, GradCheckOptions::default()).unwrap();
    assert!(rep.max_rel_err < 1e-9, "{}", rep.max_rel_err);
}

#[test]
fn mlp_cross_entropy_gradient() {
    let params = vec![
        rand_tensor(&[4, 6], 90),
        rand_tensor(&[8, 6], 91),
        rand_tensor(&[8], 92),
        rand_tensor(&[3, 8], 93),
        rand_tensor(&[3], 94),
    ];
    let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let h = g.linear(v[0], v[1], Some(v[2]))?;
        let h = g.elu(h)?;
        let o = g.linear(h, v[3], Some(v[4]))?;
        g.cross_entropy(o, &[0, 2, 1, 2])
    };
    let f = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let v: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &v)?;
        Ok(g.value(out).item())
    };
    let a = |ps: &[Tensor]| -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(Precision::F64);
        let v: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &v)?;
        let gr = g.backward(out)?;
        Ok(v.iter().map(|&x| gr.get(x).unwrap().to_vec()).collect())
    };
    let rep = grad_check(&params, f, a, GradCheckOptions::default()).unwrap();
    assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
}

#[test]
fn non_finite_values_trip_an_error() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(Tensor::full(&[2], 1e300));
    let y = g.mul(x, x);
    assert!(matches!(y, Err(fcdn_core::Error::NonFinite(_))));
}

#[test]
fn nondeterministic_function_rejected() {
    let mut calls = 0.0;
    let f = |_: &[Tensor]| {
        calls += 1.0;
        Ok(calls)
    };
    let a = |_: &[Tensor]| Ok(vec![vec![0.0]]);
    assert!(grad_check(&[Tensor::scalar(1.0)], f, a, GradCheckOptions::default()).is_err());
}
