use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::grad_check;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Contracts an arbitrary output with fixed random weights so every output
/// coordinate influences the scalar under test.
fn project(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(&tape.shape(y), seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn assert_grad_ok<F>(f: F, inputs: &[Tensor<f64>])
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = grad_check(f, inputs, 1e-5).unwrap();
    assert!(report.passed(1e-4), "{report:?}");
}

/// Direct nested-loop convolution, independent of the im2col path.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ks, cout) = (k.shape()[0], k.shape()[3]);
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = b.data()[co];
                for ky in 0..ks {
                    for kx in 0..ks {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.data()[(iy as usize * w + ix as usize) * cin + ci]
                                * k.data()[((ky * ks + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    Tensor::new(vec![ho, wo, cout], out).unwrap()
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let tape = Tape::<f64>::new();
    let x = random(&[4, 5, 1], 1);
    let mut k = Tensor::zeros(vec![3, 3, 1, 1]);
    k.data_mut()[4] = 1.0;
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k);
    let bv = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv2d(xv, kv, bv, 1, 1).unwrap();
    assert_eq!(tape.value(y), x);
}

#[test]
fn conv_all_ones_kernel_on_constant_image() {
    let tape = Tape::<f64>::new();
    let c = 0.7;
    let x = tape.constant(Tensor::full(vec![5, 6, 1], c));
    let k = tape.constant(Tensor::ones(vec![3, 3, 1, 1]));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.value(tape.conv2d(x, k, b, 1, 0).unwrap());
    assert_eq!(y.shape(), &[3, 4, 1]);
    for &v in y.data() {
        assert!((v - 9.0 * c).abs() < 1e-12);
    }
}

#[test]
fn conv_matches_nested_loop_oracle() {
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let x = random(&[5, 5, 2], 10);
        let k = random(&[3, 3, 2, 3], 11);
        let b = random(&[3], 12);
        let tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.value(tape.conv2d(xv, kv, bv, stride, pad).unwrap());
        let expect = conv_oracle(&x, &k, &b, stride, pad);
        assert_eq!(y.shape(), expect.shape());
        assert!(y.max_abs_diff(&expect) < 1e-6);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![4, 4, 2]));
    let k = tape.constant(Tensor::zeros(vec![3, 3, 3, 1]));
    let b = tape.constant(Tensor::zeros(vec![1]));
    assert!(matches!(tape.conv2d(x, k, b, 1, 1), Err(Error::Dimension { .. })));
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
    let g = tape.constant(Tensor::ones(vec![2]));
    let b = tape.constant(Tensor::zeros(vec![2]));
    let y = tape.value(tape.layer_norm(x, g, b, 1e-5).unwrap());
    assert!((y.data()[0] - 1.0).abs() < 1e-4 && (y.data()[1] + 1.0).abs() < 1e-4);

    let x = tape.constant(Tensor::full(vec![3, 4], 2.5));
    let g = tape.constant(Tensor::ones(vec![4]));
    let beta = tape.constant(Tensor::full(vec![4], 0.3));
    let y = tape.value(tape.layer_norm(x, g, beta, 1e-5).unwrap());
    assert!(y.data().iter().all(|&v| v == 0.3));
}

#[test]
fn layer_norm_row_statistics() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(random(&[4, 8], 3));
    let g = tape.constant(Tensor::ones(vec![8]));
    let b = tape.constant(Tensor::zeros(vec![8]));
    let y = tape.value(tape.layer_norm(x, g, b, 1e-5).unwrap());
    for row in y.data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn silu_values() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![3], vec![0.0, 10.0, -10.0]).unwrap());
    let y = tape.value(tape.silu(x));
    // x·σ(x) evaluated directly: 10/(1+e^-10), -10/(1+e^10)
    let oracle = |x: f64| x / (1.0 + (-x).exp());
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 9.99955).abs() < 1e-5);
    assert!((y.data()[1] - oracle(10.0)).abs() < 1e-12);
    assert!((y.data()[2] - (-4.54e-4)).abs() < 1e-6);
    assert!((y.data()[2] - oracle(-10.0)).abs() < 1e-12);
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::<f64>::new();
    let x0 = random(&[5], 4);
    let x = tape.leaf(x0.clone());
    let sq = tape.square(x);
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap().wrt(x);
    for (gi, xi) in g.data().iter().zip(x0.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-15);
    }
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(random(&[3], 5));
    let unused = tape.leaf(random(&[2, 2], 6));
    let loss = tape.sum(x);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.wrt(unused), Tensor::zeros(vec![2, 2]));
}

#[test]
fn backward_requires_scalar_loss() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(random(&[3], 7));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn requires_grad_propagates_from_any_input() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(random(&[2], 1));
    let c = tape.constant(random(&[2], 2));
    let both_const = tape.add(c, c).unwrap();
    let mixed = tape.mul(a, c).unwrap();
    assert!(!tape.requires_grad(both_const));
    assert!(tape.requires_grad(mixed));
}

#[test]
fn conv_silu_sum_chain_matches_finite_differences() {
    let inputs = [random(&[5, 5, 2], 20), random(&[3, 3, 2, 3], 21), random(&[3], 22)];
    assert_grad_ok(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let s = t.silu(y);
            Ok(t.sum(s))
        },
        &inputs,
    );
}

#[test]
fn reuse_accumulates_both_paths() {
    // f(x) = Σ x·x + Σ 3x computed with x consumed three times must equal
    // the same function built from independent copies of x.
    let x0 = random(&[4], 30);
    let tape = Tape::<f64>::new();
    let x = tape.leaf(x0.clone());
    let xx = tape.mul(x, x).unwrap();
    let x3 = tape.scale(x, 3.0);
    let sum = tape.add(xx, x3).unwrap();
    let loss = tape.sum(sum);
    assert_eq!(tape.uses(x), 3);
    let shared = tape.backward(loss).unwrap().wrt(x);

    let tape = Tape::<f64>::new();
    let (a, b, c) = (tape.leaf(x0.clone()), tape.leaf(x0.clone()), tape.leaf(x0.clone()));
    let ab = tape.mul(a, b).unwrap();
    let c3 = tape.scale(c, 3.0);
    let sum = tape.add(ab, c3).unwrap();
    let loss = tape.sum(sum);
    let g = tape.backward(loss).unwrap();
    let split: Vec<f64> = (0..4)
        .map(|i| g.wrt(a).data()[i] + g.wrt(b).data()[i] + g.wrt(c).data()[i])
        .collect();
    for (s, d) in shared.data().iter().zip(&split) {
        assert!((s - d).abs() < 1e-14);
    }
}

#[test]
fn primitive_gradients() {
    let m = random(&[3, 4], 40);
    let m2 = random(&[3, 4], 41);
    let pos = m.map(|v| v.abs() + 0.5);

    assert_grad_ok(|t, v| project(t, t.add(v[0], v[1])?, 1), &[m.clone(), m2.clone()]);
    assert_grad_ok(|t, v| project(t, t.sub(v[0], v[1])?, 1), &[m.clone(), m2.clone()]);
    assert_grad_ok(|t, v| project(t, t.mul(v[0], v[1])?, 1), &[m.clone(), m2.clone()]);
    assert_grad_ok(|t, v| project(t, t.scale(v[0], -1.7), 2), std::slice::from_ref(&m));
    assert_grad_ok(|t, v| project(t, t.add_scalar(v[0], 0.3), 2), std::slice::from_ref(&m));
    for f in [
        Unary::Neg,
        Unary::Exp,
        Unary::Square,
        Unary::Sigmoid,
        Unary::Silu,
        Unary::Softplus,
        Unary::Tanh,
    ] {
        assert_grad_ok(|t, v| project(t, t.unary(v[0], f), 3), std::slice::from_ref(&m));
    }
    for f in [Unary::Log, Unary::Sqrt, Unary::Recip] {
        assert_grad_ok(|t, v| project(t, t.unary(v[0], f), 3), std::slice::from_ref(&pos));
    }
    assert_grad_ok(|t, v| project(t, t.smooth_l1(v[0], 1.0), 4), &[m.map(|x| 1.7 * x)]);
    assert_grad_ok(|t, v| project(t, t.clamp_min(v[0], -0.95), 4), std::slice::from_ref(&m));
    assert_grad_ok(|t, v| Ok(t.mean(v[0])), std::slice::from_ref(&m));
    assert_grad_ok(|t, v| project(t, t.sum_axis(v[0], 0)?, 5), std::slice::from_ref(&m));
    assert_grad_ok(|t, v| project(t, t.sum_axis(v[0], 1)?, 5), std::slice::from_ref(&m));
    assert_grad_ok(|t, v| project(t, t.reshape(v[0], vec![2, 6])?, 6), std::slice::from_ref(&m));
    assert_grad_ok(|t, v| project(t, t.transpose(v[0])?, 6), std::slice::from_ref(&m));
    assert_grad_ok(
        |t, v| project(t, t.matmul(v[0], v[1])?, 7),
        &[m.clone(), random(&[4, 5], 42)],
    );
    assert_grad_ok(|t, v| project(t, t.softmax(v[0])?, 8), std::slice::from_ref(&m));
    assert_grad_ok(|t, v| project(t, t.log_softmax(v[0])?, 8), std::slice::from_ref(&m));
    assert_grad_ok(|t, v| project(t, t.slice(v[0], 1, 1, 2)?, 9), std::slice::from_ref(&m));
    assert_grad_ok(|t, v| project(t, t.concat(&[v[0], v[1]], 1)?, 9), &[m.clone(), random(&[3, 2], 43)]);
    assert_grad_ok(|t, v| project(t, t.concat(&[v[0], v[1]], 0)?, 9), &[m.clone(), m2.clone()]);
    let idx: Arc<[usize]> = vec![2, 0, 0, 1].into();
    assert_grad_ok(|t, v| project(t, t.gather_rows(v[0], idx.clone())?, 10), std::slice::from_ref(&m));
    let flat: Arc<[usize]> = vec![11, 3, 3, 0].into();
    assert_grad_ok(|t, v| project(t, t.gather(v[0], flat.clone())?, 10), std::slice::from_ref(&m));
    assert_grad_ok(|t, v| project(t, t.embedding(v[0], &[2, 0, 2])?, 11), std::slice::from_ref(&m));
    assert_grad_ok(|t, v| project(t, t.broadcast_rows(v[0], vec![2, 3, 4])?, 11), &[random(&[4], 44)]);
    assert_grad_ok(
        |t, v| project(t, t.add_channel(v[0], v[1])?, 12),
        &[m.clone(), random(&[4], 45)],
    );
    assert_grad_ok(
        |t, v| project(t, t.mul_channel(v[0], v[1])?, 12),
        &[m.clone(), random(&[4], 45)],
    );
    assert_grad_ok(
        |t, v| project(t, t.mul_leading(v[0], v[1])?, 12),
        &[random(&[2, 3, 4], 46), random(&[2, 3], 47)],
    );
    assert_grad_ok(
        |t, v| project(t, t.linear(v[0], v[1], Some(v[2]))?, 13),
        &[random(&[2, 3, 4], 48), random(&[4, 5], 49), random(&[5], 50)],
    );
    assert_grad_ok(
        |t, v| project(t, t.layer_norm(v[0], v[1], v[2], 1e-5)?, 14),
        &[random(&[3, 6], 51), random(&[6], 52), random(&[6], 53)],
    );
    assert_grad_ok(
        |t, v| project(t, t.conv2d(v[0], v[1], v[2], 2, 1)?, 15),
        &[random(&[5, 4, 2], 54), random(&[3, 3, 2, 2], 55), random(&[2], 56)],
    );
    assert_grad_ok(
        |t, v| project(t, t.depthwise_conv2d(v[0], v[1], v[2], 1)?, 16),
        &[random(&[4, 5, 3], 57), random(&[3, 3, 3], 58), random(&[3], 59)],
    );
}

#[test]
fn softmax_rows_sum_to_one() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(random(&[5, 7], 60).map(|v| 30.0 * v));
    let y = tape.value(tape.softmax(x).unwrap());
    for row in y.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn embedding_rejects_out_of_vocabulary_ids() {
    let tape = Tape::<f64>::new();
    let table = tape.constant(random(&[4, 2], 61));
    assert!(matches!(tape.embedding(table, &[1, 4]), Err(Error::Contract(_))));
}

#[test]
fn evaluation_is_deterministic() {
    let run = || {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(random(&[6, 6, 2], 70).cast());
        let k = tape.leaf(random(&[3, 3, 2, 4], 71).cast());
        let b = tape.leaf(random(&[4], 72).cast());
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        let s = tape.silu(y);
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        (tape.value(loss), g.wrt(x), g.wrt(k))
    };
    assert_eq!(run(), run());
}
