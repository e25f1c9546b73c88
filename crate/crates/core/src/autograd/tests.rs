use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Central-difference check of `build` w.r.t. each input. The scalar loss is
/// `Σ out ∘ R` for a fixed random `R`.
fn fd_check(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let h = 1e-5;
    let eval = |xs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let out = build(&mut t, &vars);
        let w = weights
            .cloned()
            .unwrap_or_else(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                Tensor::from_fn(t.shape(out), |_| rng.random_range(-1.0..1.0))
            });
        let wv = t.constant(w.clone());
        let prod = t.mul(out, wv).unwrap();
        let loss = t.sum(prod, None).unwrap();
        let value = t.value(loss).data()[0];
        (t, vars, loss, value, w)
    };
    let (tape, vars, loss, _, weights) = eval(inputs, None);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap().data().to_vec();
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fp = eval(&plus, Some(&weights)).3;
            let fm = eval(&minus, Some(&weights)).3;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn matmul_identity_and_annihilation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let mut t = Tape::new();
    let i3 = t.constant(Tensor::identity(3));
    let bv = t.constant(b.clone());
    let p = t.matmul(i3, bv).unwrap();
    assert_eq!(t.value(p), &b);
    let z = t.constant(Tensor::zeros(&[4, 2]));
    let q = t.matmul(bv, z).unwrap();
    assert!(t.value(q).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[3, 5]);
    let mut oracle = vec![0.0; 20];
    for i in 0..4 {
        for j in 0..5 {
            for k in 0..3 {
                oracle[i * 5 + j] += a.at(&[i, k]) * b.at(&[k, j]);
            }
        }
    }
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a), t.constant(b));
    let c = t.matmul(av, bv).unwrap();
    assert_eq!(t.shape(c), &[4, 5]);
    assert!(close(t.value(c).data(), &oracle, 1e-12));
}

#[test]
fn matmul_rejects_inner_mismatch_naming_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 2]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += x.at(&[c, iy as usize, ix as usize]) * k.at(&[o, c, dy, dx]);
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    (vec![co, oh, ow], out)
}

#[test]
fn conv2d_identity_zero_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 4, 4]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let one = t.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = t.conv2d(xv, one, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &x);

    let zero = t.constant(Tensor::zeros(&[2, 1, 3, 3]));
    let z = t.conv2d(xv, zero, None, 1, 1).unwrap();
    assert!(t.value(z).data().iter().all(|&v| v == 0.0));

    let x2 = rand_tensor(&mut rng, &[2, 4, 4]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x2.clone()), t.constant(k.clone()));
        if (4 + 2 * pad - 3) % stride != 0 {
            continue;
        }
        let y = t.conv2d(xv, kv, None, stride, pad).unwrap();
        let (shape, want) = conv_oracle(&x2, &k, stride, pad);
        assert_eq!(t.shape(y), shape.as_slice());
        assert!(close(t.value(y).data(), &want, 1e-12));
    }
}

#[test]
fn conv2d_rejects_non_integral_output() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 4, 4]));
    let k = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(t.conv2d(x, k, None, 2, 0), Err(crate::MglError::Shape(_))));
    let even = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(t.conv2d(x, even, None, 1, 0).is_err());
}

#[test]
fn unary_closed_forms() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::scalar(0.0));
    let s = t.sigmoid(z);
    assert_eq!(t.value(s).data()[0], 0.5);
    let x = t.constant(Tensor::from_f64(&[3], &[-0.5, -2.0, -1e-9]).unwrap());
    let r = t.relu(x);
    assert!(t.value(r).data().iter().all(|&v| v == 0.0));
    let big = t.constant(Tensor::from_f64(&[2], &[-800.0, 800.0]).unwrap());
    let sb = t.sigmoid(big);
    assert_eq!(t.value(sb).data(), &[0.0, 1.0]);
}

#[test]
fn division_by_tiny_values_is_clamped_and_counted() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::from_f64(&[3], &[1.0, 1.0, 1.0]).unwrap());
    let b = t.constant(Tensor::from_f64(&[3], &[0.0, -1e-300, 2.0]).unwrap());
    let q = t.div(a, b).unwrap();
    let v = t.value(q).data();
    assert_eq!(v[0], 1.0 / f64::EPSILON);
    assert_eq!(v[1], -1.0 / f64::EPSILON);
    assert_eq!(v[2], 0.5);
    assert_eq!(t.numerics().clamped_divisions, 2);
}

#[test]
fn broadcast_is_limited_to_one_singleton_axis() {
    let mut t = Tape::<f64>::new();
    let map = t.constant(Tensor::from_fn(&[1, 2, 2], |i| i as f64));
    let feats = t.constant(Tensor::ones(&[3, 2, 2]));
    let g = t.mul(map, feats).unwrap();
    assert_eq!(t.shape(g), &[3, 2, 2]);
    assert_eq!(t.value(g).at(&[2, 1, 1]), 3.0);

    let rows = t.constant(Tensor::ones(&[3, 1]));
    let bad = t.constant(Tensor::ones(&[1, 4]));
    assert!(t.add(rows, bad).is_err(), "two-axis broadcast must be rejected");
    let vec3 = t.constant(Tensor::ones(&[3]));
    let m = t.constant(Tensor::ones(&[3, 3]));
    assert!(t.add(vec3, m).is_err(), "rank mismatch must be rejected");
}

#[test]
fn softmax_closed_forms_and_oracle() {
    let mut t = Tape::<f64>::new();
    let u = t.constant(Tensor::full(&[4], 3.7));
    let s = t.softmax(u, 0).unwrap();
    assert!(close(t.value(s).data(), &[0.25; 4], 1e-15));

    let x = t.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
    let s = t.softmax(x, 0).unwrap();
    let e = std::f64::consts::E;
    assert!(close(t.value(s).data(), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-15));
    assert!((t.value(s).data()[0] - 0.7311).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = rand_tensor(&mut rng, &[3, 6]);
    let rv = t.constant(r.clone());
    let s = t.softmax(rv, 1).unwrap();
    for row in 0..3 {
        let exps: Vec<f64> = (0..6).map(|j| r.at(&[row, j]).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in 0..6 {
            assert!((t.value(s).at(&[row, j]) - exps[j] / total).abs() <= 1e-12);
        }
    }
}

#[test]
fn softmax_is_stable_for_large_inputs() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_f64(&[3], &[1e4, -1e4, 9999.0]).unwrap());
    let s = t.softmax(x, 0).unwrap();
    let v = t.value(s);
    assert!(v.all_finite());
    assert!((v.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
}

#[test]
fn reductions() {
    let mut t = Tape::<f64>::new();
    let ones = t.leaf(Tensor::ones(&[2, 3]), true);
    let s = t.sum(ones, None).unwrap();
    assert_eq!(t.value(s).data(), &[6.0]);
    let rows = t.sum(ones, Some(1)).unwrap();
    assert_eq!(t.shape(rows), &[2, 1]);

    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(&[3], &[1.0, 5.0, 2.0]).unwrap(), true);
    let m = t.max(x, None).unwrap();
    assert_eq!(t.value(m).data(), &[5.0]);
    let g = t.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);

    let mut t = Tape::<f64>::new();
    let tie = t.leaf(Tensor::from_f64(&[3], &[4.0, 4.0, 1.0]).unwrap(), true);
    let m = t.max(tie, None).unwrap();
    let g = t.backward(m).unwrap();
    assert_eq!(g.get(tie).unwrap().data(), &[1.0, 0.0, 0.0], "first argmax wins ties");

    let mut t = Tape::<f64>::new();
    let e = t.constant(Tensor::zeros(&[2, 0]));
    assert!(t.sum(e, Some(1)).is_err());
    assert!(t.sum(e, Some(2)).is_err());
}

#[test]
fn concat_shapes_and_slice_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[2, 5]);
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let single = t.concat(&[av], 1).unwrap();
    assert_eq!(t.value(single), &a);
    let c = t.concat(&[av, bv], 1).unwrap();
    assert_eq!(t.shape(c), &[2, 8]);
    let cv = t.value(c);
    for r in 0..2 {
        for j in 0..3 {
            assert_eq!(cv.at(&[r, j]).to_bits(), a.at(&[r, j]).to_bits());
        }
        for j in 0..5 {
            assert_eq!(cv.at(&[r, 3 + j]).to_bits(), b.at(&[r, j]).to_bits());
        }
    }
    let wrong = t.constant(Tensor::zeros(&[3, 5]));
    assert!(t.concat(&[av, wrong], 1).is_err());
}

#[test]
fn bilinear_resize_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 3, 5]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let same = t.resize_bilinear(xv, 3, 5).unwrap();
    assert_eq!(t.value(same), &x);

    let c = t.constant(Tensor::full(&[1, 3, 3], 0.42));
    let up = t.resize_bilinear(c, 7, 11).unwrap();
    assert!(t.value(up).data().iter().all(|&v| (v - 0.42).abs() < 1e-15));

    // 2×2 → 4×4 by hand: source coordinate (o + 0.5)/2 − 0.5, clamped at 0.
    let src = [1.0, 2.0, 3.0, 4.0];
    let s = t.constant(Tensor::from_f64(&[1, 2, 2], &src).unwrap());
    let up = t.resize_bilinear(s, 4, 4).unwrap();
    let coord = |o: usize| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
    for oy in 0..4 {
        for ox in 0..4 {
            let (fy, fx) = (coord(oy), coord(ox));
            let want = src[0] * (1.0 - fy) * (1.0 - fx)
                + src[1] * (1.0 - fy) * fx
                + src[2] * fy * (1.0 - fx)
                + src[3] * fy * fx;
            assert!((t.value(up).at(&[0, oy, ox]) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn backward_closed_forms() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_fn(&[2, 2], |i| i as f64), true);
    let s = t.sum(x, None).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let sq = t.mul(x, x).unwrap();
    let g = t.backward(sq).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);

    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::ones(&[2]), true);
    assert!(t.backward(x).is_err(), "non-scalar loss");
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::scalar(2.0), true);
    let c = t.constant(Tensor::scalar(5.0));
    let p = t.mul(x, c).unwrap();
    let g = t.backward(p).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[5.0]);
    assert!(g.get(c).is_none());
}

#[test]
fn gradients_of_every_primitive_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tol = 1e-5;
    let m34 = rand_tensor(&mut rng, &[3, 4]);
    let m45 = rand_tensor(&mut rng, &[4, 5]);
    let m35 = rand_tensor(&mut rng, &[3, 5]);
    let m34b = rand_tensor(&mut rng, &[3, 4]);
    let col = rand_tensor(&mut rng, &[3, 1]);
    let positive = Tensor::from_fn(&[3, 4], |i| 0.5 + (i as f64 * 0.37).sin().abs());
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>)> = vec![
        ("matmul", vec![m34.clone(), m45.clone()], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("matmul_ta", vec![m34.clone(), m35.clone()], Box::new(|t, v| t.matmul_t(v[0], v[1], true, false).unwrap())),
        ("matmul_tb", vec![m35.clone(), m45.clone()], Box::new(|t, v| t.matmul_t(v[0], v[1], false, true).unwrap())),
        ("matmul_tatb", vec![m45.clone(), m34b.clone()], Box::new(|t, v| t.matmul_t(v[0], v[1], true, true).unwrap())),
        ("add", vec![m34.clone(), m34b.clone()], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![m34.clone(), m34b.clone()], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![m34.clone(), m34b.clone()], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("div", vec![m34.clone(), positive.clone()], Box::new(|t, v| t.div(v[0], v[1]).unwrap())),
        ("mul_bcast", vec![col.clone(), m34.clone()], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("div_bcast", vec![m34.clone(), Tensor::from_f64(&[3, 1], &[0.7, -1.3, 2.0]).unwrap()], Box::new(|t, v| t.div(v[0], v[1]).unwrap())),
        ("relu", vec![m34.clone()], Box::new(|t, v| t.relu(v[0]))),
        ("sigmoid", vec![m34.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
        ("exp", vec![m34.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("neg", vec![m34.clone()], Box::new(|t, v| t.neg(v[0]))),
        ("scale", vec![m34.clone()], Box::new(|t, v| t.scale(v[0], -2.5))),
        ("scalar_mul", vec![Tensor::scalar(0.3), m34.clone()], Box::new(|t, v| t.scalar_mul(v[0], v[1]).unwrap())),
        ("softmax0", vec![m34.clone()], Box::new(|t, v| t.softmax(v[0], 0).unwrap())),
        ("softmax1", vec![m34.clone()], Box::new(|t, v| t.softmax(v[0], 1).unwrap())),
        ("sum", vec![m34.clone()], Box::new(|t, v| t.sum(v[0], Some(0)).unwrap())),
        ("mean", vec![m34.clone()], Box::new(|t, v| t.mean(v[0], Some(1)).unwrap())),
        ("max", vec![m34.clone()], Box::new(|t, v| t.max(v[0], Some(1)).unwrap())),
        ("concat", vec![m34.clone(), m35.clone()], Box::new(|t, v| t.concat(&[v[0], v[1]], 1).unwrap())),
        ("transpose", vec![m34.clone()], Box::new(|t, v| t.transpose(v[0]).unwrap())),
        ("reshape", vec![m34.clone()], Box::new(|t, v| t.reshape(v[0], &[2, 6]).unwrap())),
        ("gather_rows", vec![m34.clone()], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap())),
        ("normalize_rows", vec![m34.clone()], Box::new(|t, v| t.normalize_rows(v[0], 1e-8).unwrap())),
        (
            "conv2d",
            vec![rand_tensor(&mut rng, &[2, 5, 5]), rand_tensor(&mut rng, &[3, 2, 3, 3]), rand_tensor(&mut rng, &[3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()),
        ),
        (
            "resize",
            vec![rand_tensor(&mut rng, &[2, 3, 4])],
            Box::new(|t, v| t.resize_bilinear(v[0], 7, 5).unwrap()),
        ),
        (
            "bce",
            vec![Tensor::from_fn(&[2, 3], |i| 0.1 + 0.13 * i as f64)],
            Box::new(|t, v| {
                let target = Tensor::from_f64(&[2, 3], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
                t.bce(v[0], &target, 1e-7).unwrap()
            }),
        ),
    ];
    for (name, inputs, build) in cases {
        let err = fd_check(&inputs, build);
        assert!(err < tol, "{name}: worst relative error {err:e}");
    }
}

#[test]
fn fault_injection_breaks_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let mut t = Tape::new();
    t.inject_fault(Some(BackwardFault {
        op: OpKind::MatMul,
        factor: 1.5,
    }));
    let (av, bv) = (t.leaf(a, true), t.leaf(b.clone(), true));
    let c = t.matmul(av, bv).unwrap();
    let s = t.sum(c, None).unwrap();
    let g = t.backward(s).unwrap();
    // d/da Σ(ab) = row sums of b broadcast across rows; corrupted by 1.5
    let want: f64 = b.data()[0] + b.data()[1];
    assert!((g.get(av).unwrap().data()[0] - 1.5 * want).abs() < 1e-12);
}

#[test]
fn identical_inputs_give_bitwise_identical_results() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::from_fn(&[2, 6, 6], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::<f32>::from_fn(&[4, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mut t = Tape::new();
        let (xv, kv) = (t.leaf(x, true), t.leaf(k, true));
        let y = t.conv2d(xv, kv, None, 1, 1).unwrap();
        let s = t.sigmoid(y);
        let l = t.mean(s, None).unwrap();
        let out = t.value(l).data()[0].to_bits();
        let g = t.backward(l).unwrap();
        let gk: Vec<u32> = g.get(kv).unwrap().data().iter().map(|v| v.to_bits()).collect();
        (out, gk)
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-1e4f64..1e4, 1..40)) {
        let n = values.len();
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[1, n], values).unwrap());
        let s = t.softmax(x, 1).unwrap();
        let v = t.value(s);
        prop_assert!(v.all_finite());
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
        prop_assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
