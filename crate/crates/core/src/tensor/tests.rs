use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Single-parameter store for checking op gradients through `grad_check`.
fn store_of(ts: &[Tensor<f64>]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, t) in ts.iter().enumerate() {
        s.insert(&format!("p{i}"), t.clone(), ParamGroup::Base).unwrap();
    }
    s.set_trainable(|_| true);
    s
}

/// Weighted sum so every output element has a distinct upstream gradient.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = rand_t(t.shape(y), seed);
    let wv = t.constant(w);
    let p = t.mul(y, wv).unwrap();
    t.sum(p)
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut t = Tape::<f64>::new();
    let i = t.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
    let x = t.constant(rand_t(&[2, 3], 1));
    let y = t.matmul(i, x).unwrap();
    assert_eq!(t.value(y), t.value(x));

    let a = t.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let b = t.constant(Tensor::from_f64(&[2, 1], &[5., 6.]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[17., 39.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut s = store_of(&[rand_t(&[3, 4], 2), rand_t(&[4, 2], 3)]);
    let r = grad_check(&mut s, 1e-3, |t, s| {
        let a = t.param(s, ParamId(0));
        let b = t.param(s, ParamId(1));
        let c = t.matmul(a, b)?;
        Ok(t.sum(c))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn transposed_matmul_gradients() {
    for (ta, tb) in [(true, false), (false, true), (true, true)] {
        let sa = if ta { [4, 3] } else { [3, 4] };
        let sb = if tb { [2, 4] } else { [4, 2] };
        let mut s = store_of(&[rand_t(&sa, 4), rand_t(&sb, 5)]);
        let r = grad_check(&mut s, 1e-3, |t, s| {
            let a = t.param(s, ParamId(0));
            let b = t.param(s, ParamId(1));
            let c = t.matmul_t(a, b, ta, tb)?;
            Ok(weighted_sum(t, c, 6))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "ta={ta} tb={tb} {r:?}");
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[3]));
    let y = t.softmax_lastdim(x).unwrap();
    for &v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t.constant(Tensor::from_f64(&[1], &[42.0]).unwrap());
    let y = t.softmax_lastdim(x).unwrap();
    assert_eq!(t.value(y).data(), &[1.0]);

    let x = t.constant(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
    let y = t.softmax_lastdim(x).unwrap();
    let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
    for (i, &v) in t.value(y).data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-7);
    }

    let x = t.constant(Tensor::from_f64(&[2], &[1.0, f64::NAN]).unwrap());
    assert!(matches!(t.softmax_lastdim(x), Err(Error::Numeric { .. })));
    let x = t.constant(Tensor::from_f64(&[2], &[1.0, f64::INFINITY]).unwrap());
    assert!(t.softmax_lastdim(x).is_err());
}

#[test]
fn softmax_rows_sum_to_one_even_for_large_logits() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_f64(&[2, 3], &[1000., 1001., 999., -5., 0., 5.]).unwrap());
    let y = t.softmax_lastdim(x).unwrap();
    for row in t.value(y).data().chunks(3) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

/// Naive six-loop cross-correlation.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let [cin, h, w] = x.dims3("o").unwrap();
    let ks = k.shape();
    let (cout, kk) = (ks[0], ks[2]);
    let ho = (h + 2 * pad - kk) / stride + 1;
    let wo = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..cin {
                    for i in 0..kk {
                        for j in 0..kk {
                            let iy = (oy * stride + i) as isize - pad as isize;
                            let ix = (ox * stride + j) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.data()[(c * h + iy as usize) * w + ix as usize]
                                    * k.data()[((o * cin + c) * kk + i) * kk + j];
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_examples() {
    let mut t = Tape::<f64>::new();
    let x = rand_t(&[1, 4, 4], 7);
    let xv = t.constant(x.clone());
    let one = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = t.conv2d(xv, one, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &x);

    let z = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let y = t.conv2d(xv, z, None, 1, 1).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let x = rand_t(&[2, 5, 5], 8);
    let k = rand_t(&[3, 2, 3, 3], 9);
    let xv = t.constant(x.clone());
    let kv = t.constant(k.clone());
    for stride in [1, 2] {
        let y = t.conv2d(xv, kv, None, stride, 1).unwrap();
        let want = conv_oracle(&x, &k, stride, 1);
        assert_eq!(t.value(y).numel(), want.len());
        for (a, b) in t.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    let bad = t.constant(Tensor::zeros(&[3, 4, 3, 3]));
    assert!(matches!(t.conv2d(xv, bad, None, 1, 1), Err(Error::Dimension { .. })));
}

#[test]
fn conv2d_gradients() {
    for stride in [1, 2] {
        let mut s = store_of(&[rand_t(&[2, 5, 5], 10), rand_t(&[3, 2, 3, 3], 11), rand_t(&[3], 12)]);
        let r = grad_check(&mut s, 1e-3, |t, s| {
            let x = t.param(s, ParamId(0));
            let k = t.param(s, ParamId(1));
            let b = t.param(s, ParamId(2));
            let y = t.conv2d(x, k, Some(b), stride, 1)?;
            Ok(weighted_sum(t, y, 13))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "stride {stride}: {r:?}");
    }
}

#[test]
fn group_norm_and_silu_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full(&[4, 3, 3], 2.5));
    let y = t.group_norm(x, 2, None, None, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    let x = t.constant(Tensor::zeros(&[3]));
    let y = t.silu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);
    let x = t.constant(Tensor::zeros(&[6, 2]));
    assert!(matches!(t.group_norm(x, 4, None, None, 1e-5), Err(Error::Dimension { .. })));
}

#[test]
fn group_norm_gradient() {
    let mut s = store_of(&[rand_t(&[4, 3, 3], 14), rand_t(&[4], 15), rand_t(&[4], 16)]);
    let r = grad_check(&mut s, 1e-3, |t, s| {
        let x = t.param(s, ParamId(0));
        let g = t.param(s, ParamId(1));
        let b = t.param(s, ParamId(2));
        let y = t.group_norm(x, 2, Some(g), Some(b), 1e-5)?;
        Ok(weighted_sum(t, y, 17))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn grad_check_trivial_functions() {
    let p = rand_t(&[3, 3], 18);
    let mut s = store_of(&[p.clone()]);
    let r = grad_check(&mut s, 1e-4, |t, s| {
        let x = t.param(s, ParamId(0));
        Ok(t.sum(x))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-10, "{r:?}");

    let r = grad_check(&mut s, 1e-4, |t, s| {
        let x = t.param(s, ParamId(0));
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");

    // analytic check: gradient of sum(p²) is 2p
    let mut tape = Tape::new();
    let x = tape.param(&s, ParamId(0));
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    for (g, v) in tape.grad(x).unwrap().iter().zip(p.data()) {
        assert!((g - 2.0 * v).abs() < 1e-12);
    }
}

#[test]
fn grad_check_reports_non_finite_loss() {
    let mut s = store_of(&[Tensor::from_f64(&[1], &[0.0]).unwrap()]);
    let r = grad_check(&mut s, 1e-3, |t, s| {
        let x = t.param(s, ParamId(0));
        let inf = t.constant(Tensor::scalar(f64::INFINITY));
        let y = t.mul(x, inf)?;
        Ok(t.sum(y))
    });
    assert!(r.is_err());
}

#[test]
fn attention_matches_composed_ops() {
    let (n, m, d, heads) = (3, 4, 6, 2);
    let q = rand_t(&[n, d], 20);
    let k = rand_t(&[m, d], 21);
    let v = rand_t(&[m, d], 22);
    let mut t = Tape::<f64>::new();
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let fused = t.attention(qv, kv, vv, heads).unwrap();
    let hd = d / heads;
    for h in 0..heads {
        let slice = |x: &Tensor<f64>, rows: usize| {
            let mut o = Vec::new();
            for r in 0..rows {
                o.extend_from_slice(&x.data()[r * d + h * hd..r * d + (h + 1) * hd]);
            }
            Tensor::new(vec![rows, hd], o).unwrap()
        };
        let qh = t.constant(slice(&q, n));
        let kh = t.constant(slice(&k, m));
        let vh = t.constant(slice(&v, m));
        let s = t.matmul_t(qh, kh, false, true).unwrap();
        let s = t.scale(s, 1.0 / (hd as f64).sqrt());
        let p = t.softmax_lastdim(s).unwrap();
        let o = t.matmul(p, vh).unwrap();
        for r in 0..n {
            for c in 0..hd {
                let a = t.value(fused).data()[r * d + h * hd + c];
                let b = t.value(o).data()[r * hd + c];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

/// Every differentiable op checked against central differences on random
/// shapes for 20 seeds.
#[test]
fn all_ops_match_finite_differences_over_seeds() {
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = r.gen_range(1..4);
        let m = r.gen_range(1..4);
        let heads = r.gen_range(1..3);
        let d = heads * r.gen_range(1..3);
        let c = 2 * r.gen_range(1..3);
        let hw = 2 * r.gen_range(1..3);
        let mut s = store_of(&[
            rand_t(&[n, d], seed * 10 + 1),
            rand_t(&[m, d], seed * 10 + 2),
            rand_t(&[m, d], seed * 10 + 3),
            rand_t(&[c, hw, hw], seed * 10 + 4),
            rand_t(&[c], seed * 10 + 5),
            rand_t(&[n, d], seed * 10 + 6),
        ]);
        let rep = grad_check(&mut s, 1e-3, |t, s| {
            let q = t.param(s, ParamId(0));
            let k = t.param(s, ParamId(1));
            let v = t.param(s, ParamId(2));
            let img = t.param(s, ParamId(3));
            let bias = t.param(s, ParamId(4));
            let other = t.param(s, ParamId(5));
            let att = t.attention(q, k, v, heads)?;
            let sm = t.softmax_lastdim(att)?;
            let sub = t.sub(sm, other)?;
            let prod = t.mul(sub, q)?;
            let tr = t.transpose(prod)?;
            let rs = t.reshape(tr, &[n * d])?;
            let sil = t.silu(rs);
            let l1 = weighted_sum(t, sil, seed + 100);

            let up = t.upsample2x(img)?;
            let cb = t.add_channel_bias(up, bias)?;
            let gn = t.group_norm(cb, 2, None, None, 1e-5)?;
            let cat = t.concat(&[gn, up])?;
            let sc = t.scale(cat, 0.7);
            let l2 = weighted_sum(t, sc, seed + 200);

            let flat = t.reshape(img, &[c, hw * hw])?;
            let tok = t.transpose(flat)?;
            let rb = t.add_row_bias(tok, bias)?;
            let zero = t.constant(Tensor::zeros(&[hw * hw, c]));
            let l3 = t.mse(rb, zero)?;

            let a = t.add(l1, l2)?;
            t.add(a, l3)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "seed {seed}: {rep:?}");
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut t = Tape::<f32>::new();
        let x = t.constant(rand_t(&[2, 6, 6], 30).cast());
        let k = t.constant(rand_t(&[4, 2, 3, 3], 31).cast());
        let y = t.conv2d(x, k, None, 1, 1).unwrap();
        let y = t.group_norm(y, 2, None, None, 1e-5).unwrap();
        let y = t.reshape(y, &[4, 36]).unwrap();
        let y = t.transpose(y).unwrap();
        let a = t.attention(y, y, y, 2).unwrap();
        t.value(a).clone()
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn reshape_transpose_round_trip() {
    let x = rand_t(&[3, 5], 40);
    assert_eq!(x.transpose().unwrap().transpose().unwrap(), x);
    assert_eq!(x.reshape(&[15]).unwrap().reshape(&[3, 5]).unwrap(), x);
    assert!(x.reshape(&[4, 4]).is_err());
}

#[test]
fn frozen_leaves_never_get_gradients() {
    let mut s = store_of(&[rand_t(&[2, 2], 41), rand_t(&[2, 2], 42)]);
    s.set_trainable(|_| false);
    let mut t = Tape::new();
    let a = t.param(&s, ParamId(0));
    let b = t.param(&s, ParamId(1));
    let free = t.leaf(rand_t(&[2, 2], 43));
    let c = t.matmul(a, b).unwrap();
    let c = t.mul(c, free).unwrap();
    let l = t.sum(c);
    t.backward(l).unwrap();
    assert!(t.param_grad(ParamId(0)).is_none());
    assert!(t.param_grad(ParamId(1)).is_none());
    assert!(t.grad(free).is_some());
}

#[test]
fn shared_param_accumulates_into_one_node() {
    let s = store_of(&[rand_t(&[2, 2], 44)]);
    let mut t = Tape::new();
    let a = t.param(&s, ParamId(0));
    let a2 = t.param(&s, ParamId(0));
    assert_eq!(a, a2);
    let y = t.add(a, a2).unwrap();
    let l = t.sum(y);
    t.backward(l).unwrap();
    assert!(t.grad(a).unwrap().iter().all(|&g| g == 2.0));
}

#[test]
fn space_to_depth_round_trip_and_layout() {
    let x = rand_t(&[3, 4, 6], 50);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let d = t.space_to_depth(xv, 2).unwrap();
    assert_eq!(t.shape(d), &[12, 2, 3]);
    // channel 1·4 + 1·2 + 0 holds offset (1, 0) of channel 1
    assert_eq!(t.value(d).data()[(6 * 2 + 1) * 3 + 2], x.data()[(4 + 3) * 6 + 4]);
    let back = t.depth_to_space(d, 2).unwrap();
    assert_eq!(t.value(back), &x);
    let odd = t.constant(Tensor::zeros(&[1, 3, 4]));
    assert!(t.space_to_depth(odd, 2).is_err());
}

#[test]
fn space_to_depth_gradient() {
    let mut s = store_of(&[rand_t(&[2, 4, 4], 51)]);
    let r = grad_check(&mut s, 1e-3, |t, s| {
        let x = t.param(s, ParamId(0));
        let d = t.space_to_depth(x, 2)?;
        let sq = t.mul(d, d)?;
        let u = t.depth_to_space(sq, 2)?;
        Ok(weighted_sum(t, u, 52))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
