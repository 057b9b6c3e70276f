use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{Tensor, TensorError};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = x.chw("oracle").unwrap();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.data()[(c * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cin + c) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = acc;
            }
        }
    }
    Tensor::new(vec![cout, ho, wo], out).unwrap()
}

#[test]
fn conv2d_zero_input_gives_zero_output() {
    let mut tape = Tape::new(true);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tape.constant(Tensor::zeros(&[1, 3, 3])).unwrap();
    let w = tape.constant(random(&mut rng, &[2, 1, 3, 3], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_identity_kernel() {
    let mut tape = Tape::new(true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xt = random(&mut rng, &[1, 4, 5], 1.0);
    let x = tape.constant(xt.clone()).unwrap();
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[1])).unwrap();
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), &xt);
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = random(&mut rng, &[2, 5, 5], 1.0);
    let wt = random(&mut rng, &[3, 2, 3, 3], 1.0);
    let bt = random(&mut rng, &[3], 1.0);
    let mut tape = Tape::new(true);
    let x = tape.constant(xt.clone()).unwrap();
    let w = tape.constant(wt.clone()).unwrap();
    let b = tape.constant(bt.clone()).unwrap();
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    assert!(tape.value(y).max_abs_diff(&naive_conv(&xt, &wt, &bt, 1, 1)) < 1e-12);
}

#[test]
fn conv2d_oracle_sweep_small_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for cin in 1..=6 {
        for h in 1..=6 {
            for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (5, 1, 2), (3, 1, 0)] {
                let w_ext = 7 - h;
                let Some(_) = conv_out_extent(h, w_ext, k, stride, pad) else { continue };
                let cout = 1 + (cin + h) % 6;
                let xt = random(&mut rng, &[cin, h, w_ext], 1.0);
                let wt = random(&mut rng, &[cout, cin, k, k], 1.0);
                let bt = random(&mut rng, &[cout], 1.0);
                let mut tape = Tape::new(true);
                let x = tape.constant(xt.clone()).unwrap();
                let w = tape.constant(wt.clone()).unwrap();
                let b = tape.constant(bt.clone()).unwrap();
                let y = tape.conv2d(x, w, b, stride, pad).unwrap();
                let want = naive_conv(&xt, &wt, &bt, stride, pad);
                assert_eq!(tape.value(y).shape(), want.shape());
                assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
            }
        }
    }
}

#[test]
fn conv2d_shape_errors() {
    let mut tape = Tape::new(true);
    let x = tape.constant(Tensor::zeros(&[2, 4, 4])).unwrap();
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[1])).unwrap();
    assert!(matches!(tape.conv2d(x, w, b, 1, 1), Err(TensorError::Dimension { .. })));
    let w_even = tape.constant(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
    assert!(tape.conv2d(x, w_even, b, 1, 0).is_err());
    let w_ok = tape.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
    // (4 + 0 - 3) / 2 is not integral
    assert!(tape.conv2d(x, w_ok, b, 2, 0).is_err());
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new(true);
    let z = tape.constant(Tensor::scalar(0.0)).unwrap();
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).item(), Some(0.5));

    let c = tape.constant(Tensor::full(&[3, 4, 4], 2.5)).unwrap();
    let g = tape.global_avg_pool(c).unwrap();
    assert!(tape.value(g).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));

    let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = tape.constant(Tensor::vector(vec![3.0])).unwrap();
    assert!(matches!(tape.add(a, b), Err(TensorError::Dimension { .. })));
}

#[test]
fn instance_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new(true);
    // Input variance of order 10² keeps the ε shrinkage of the output
    // variance, ε/(var+ε), below 1e-6.
    let x = tape.constant(random(&mut rng, &[4, 8, 8], 20.0)).unwrap();
    let y = tape.instance_norm(x).unwrap();
    for plane in tape.value(y).data().chunks(64) {
        let mean = plane.iter().sum::<f64>() / 64.0;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn upsample_and_pool_shapes() {
    let mut tape = Tape::new(true);
    let x = tape.constant(Tensor::from_fn(&[1, 2, 2], |i| i as f64)).unwrap();
    let u = tape.nearest_upsample2x(x).unwrap();
    assert_eq!(tape.value(u).data(), &[0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]);
    let p = tape.maxpool2x(u).unwrap();
    assert_eq!(tape.value(p).data(), &[0., 1., 2., 3.]);
    let odd = tape.constant(Tensor::zeros(&[1, 3, 2])).unwrap();
    assert!(tape.maxpool2x(odd).is_err());
}

#[test]
fn backward_contract_errors() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut tape = Tape::new(true);
    let w = tape.param(&store, "w").unwrap();
    assert!(matches!(tape.backward(w, &mut store), Err(TensorError::Contract(_))));

    let mut tape = Tape::new(true);
    let w = tape.param(&store, "w").unwrap();
    let s = tape.sum(w).unwrap();
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.get("w").unwrap().grad.data(), &[1.0, 1.0]);
    assert!(matches!(tape.backward(s, &mut store), Err(TensorError::Contract(_))));
    tape.reset();
    let w = tape.param(&store, "w").unwrap();
    let s = tape.sum(w).unwrap();
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.get("w").unwrap().grad.data(), &[2.0, 2.0]);
}

#[test]
fn checked_mode_rejects_non_finite() {
    let mut tape = Tape::new(true);
    let x = tape.constant(Tensor::vector(vec![1e300])).unwrap();
    let y = tape.mul(x, x);
    assert!(matches!(y, Err(TensorError::NonFinite { op: "mul" })));
    let mut loose = Tape::new(false);
    let x = loose.constant(Tensor::vector(vec![1e300])).unwrap();
    assert!(loose.mul(x, x).is_ok());
}

/// Store holding each named tensor as a parameter.
fn store_of(items: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (id, t) in items {
        s.insert(*id, t.clone()).unwrap();
    }
    s
}

fn projection(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Every differentiable op passes a central-difference check at five seeds.
#[test]
fn every_op_passes_finite_differences() {
    for r in crate::gradient_suite::run_gradient_suite(0..5).unwrap() {
        assert!(r.passed(), "{} seed {}: relative error {:e}", r.name, r.seed, r.relative_error);
    }
}

#[test]
fn linear_layer_gradient_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let proj = projection(&mut rng, 4);
    let store = store_of(&[
        ("w", random(&mut rng, &[4, 6], 1.0)),
        ("x", random(&mut rng, &[6], 1.0)),
        ("b", random(&mut rng, &[4], 1.0)),
    ]);
    let err = finite_diff_check(&store, 1e-5, |t, s| {
        let (w, x, b) = (t.param(s, "w")?, t.param(s, "x")?, t.param(s, "b")?);
        let y = t.linear(w, x, b)?;
        t.dot_const(y, &proj)
    })
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store0 = store_of(&[
        ("x", random(&mut rng, &[2, 4, 4], 1.0)),
        ("w", random(&mut rng, &[3, 2, 3, 3], 1.0)),
        ("b", random(&mut rng, &[3], 1.0)),
    ]);
    let (p1, p2) = (projection(&mut rng, 48), projection(&mut rng, 48));
    let build = |t: &mut Tape, s: &ParamStore| -> (Var, Var) {
        let (x, w, b) = (t.param(s, "x").unwrap(), t.param(s, "w").unwrap(), t.param(s, "b").unwrap());
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let y = t.instance_norm(y).unwrap();
        let y = t.leaky_relu(y, 0.01).unwrap();
        (t.dot_const(y, &p1).unwrap(), t.dot_const(y, &p2).unwrap())
    };
    let mut joint = store0.clone();
    let mut t = Tape::new(true);
    let (l1, l2) = build(&mut t, &joint);
    let total = t.add(l1, l2).unwrap();
    t.backward(total, &mut joint).unwrap();

    let mut separate = store0.clone();
    for pick in 0..2 {
        let mut t = Tape::new(true);
        let (l1, l2) = build(&mut t, &separate);
        t.backward(if pick == 0 { l1 } else { l2 }, &mut separate).unwrap();
    }
    for ((_, a), (_, b)) in joint.iter().zip(separate.iter()) {
        assert!(a.grad.max_abs_diff(&b.grad) < 1e-12);
    }
}

#[test]
fn unused_parameters_are_not_marked() {
    let mut store = store_of(&[("a", Tensor::vector(vec![1.0])), ("b", Tensor::vector(vec![2.0]))]);
    let mut t = Tape::new(true);
    let a = t.param(&store, "a").unwrap();
    let s = t.sum(a).unwrap();
    t.backward(s, &mut store).unwrap();
    assert!(store.get("a").unwrap().has_grad);
    assert!(!store.get("b").unwrap().has_grad);
}
