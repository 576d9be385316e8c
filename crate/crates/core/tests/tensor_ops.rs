//! Per-op contracts for the tensor/autodiff substrate: literal identities,
//! independent brute-force oracles, and finite-difference gradient checks.

use pestnet_core::autodiff::{grad_check, Tape, Var};
use pestnet_core::params::fan_in_uniform;
use pestnet_core::rng::{stream, StreamKind};
use pestnet_core::{ParamStore, Result, Tensor};
use rand::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Random values bounded away from the relu kink at zero.
fn kink_free(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            v + 0.05 * v.signum()
        })
        .collect()
}

// --- independent oracles -------------------------------------------------

/// Triple-loop matrix product, independent of the tape kernel.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Direct sliding-window cross-correlation over a [C,H,W] image.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let ih = (oh * stride + dh) as isize - padding as isize;
                            let iw = (ow * stride + dw) as isize - padding as isize;
                            if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                acc += x[(ci * h + ih as usize) * wd + iw as usize]
                                    * w[((co * c_in + ci) * kh + dh) * kw + dw];
                            }
                        }
                    }
                }
                out[(co * ho + oh) * wo + ow] = acc;
            }
        }
    }
    out
}

// --- elementwise ----------------------------------------------------------

#[test]
fn relu_definition() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]), false);
    let y = tape.relu(x);
    assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn sigmoid_at_zero_is_half() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(0.0), false);
    let y = tape.sigmoid(x);
    assert_eq!(tape.data(y), &[0.5]);
}

#[test]
fn gelu_vanishes_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(0.0), false);
    let y = tape.gelu(x);
    assert_eq!(tape.data(y), &[0.0]);
}

#[test]
fn elementwise_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(&[2, 3]), false);
    let b = tape.leaf(&Tensor::zeros(&[3, 2]), false);
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn log_rejects_non_positive() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 0.0]), false);
    assert!(tape.log(x).is_err());
}

#[test]
fn div_rejects_zero_divisor() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[2], &[1.0, 1.0]), false);
    let b = tape.leaf(&t(&[2], &[2.0, 0.0]), false);
    assert!(tape.div(a, b).is_err());
}

// --- matmul ---------------------------------------------------------------

#[test]
fn matmul_identity() {
    let b = t(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let mut tape = Tape::new();
    let bi = tape.leaf(&b, false);
    let ii = tape.leaf(&eye, false);
    let y = tape.matmul(ii, bi).unwrap();
    assert_eq!(tape.data(y), b.data());
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    // Frozen worked example first.
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let b = tape.leaf(&t(&[2, 1], &[5.0, 6.0]), false);
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(y), &[17.0, 39.0]);

    // Then random shapes against the oracle.
    let mut rng = stream(11, StreamKind::ParamInit, 0, 0);
    let (m, k, n) = (4, 5, 3);
    let ad: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let bd: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[m, k], &ad), false);
    let b = tape.leaf(&t(&[k, n], &bd), false);
    let y = tape.matmul(a, b).unwrap();
    let expect = matmul_oracle(&ad, &bd, m, k, n);
    for (got, want) in tape.data(y).iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn matmul_zero_annihilation_and_dim_check() {
    let mut tape = Tape::new();
    let z = tape.leaf(&Tensor::zeros(&[2, 3]), false);
    let b = tape.leaf(&t(&[3, 4], &vec![1.5; 12]), false);
    let y = tape.matmul(z, b).unwrap();
    assert_eq!(tape.shape(y), &[2, 4]);
    assert!(tape.data(y).iter().all(|&v| v == 0.0));

    let bad = tape.leaf(&Tensor::zeros(&[5, 2]), false);
    assert!(tape.matmul(z, bad).is_err());
}

// --- conv2d ---------------------------------------------------------------

#[test]
fn conv2d_identity_kernel_is_bit_exact() {
    let mut rng = stream(3, StreamKind::ParamInit, 0, 0);
    let xd: Vec<f64> = (0..1 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[1, 5, 5], &xd), false);
    let w = tape.leaf(&t(&[1, 1, 1, 1], &[1.0]), false);
    let b = tape.leaf(&t(&[1], &[0.0]), false);
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.data(y), &xd[..]);
}

#[test]
fn conv2d_all_ones_kernel_over_constant_image() {
    let c = 0.37;
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::full(&[1, 6, 6], c), false);
    let w = tape.leaf(&Tensor::full(&[1, 1, 3, 3], 1.0), false);
    let b = tape.leaf(&t(&[1], &[0.0]), false);
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 4]);
    for &v in tape.data(y) {
        assert!((v - 9.0 * c).abs() < 1e-12);
    }
}

#[test]
fn conv2d_shape_arithmetic_and_oracle() {
    let mut rng = stream(5, StreamKind::ParamInit, 0, 0);
    let xd: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wd: Vec<f64> = (0..4 * 3 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bd: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3, 8, 8], &xd), false);
    let w = tape.leaf(&t(&[4, 3, 3, 3], &wd), false);
    let b = tape.leaf(&t(&[4], &bd), false);
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[4, 8, 8]);
    let expect = conv_oracle(&xd, &wd, &bd, 3, 8, 8, 4, 3, 3, 1, 1);
    for (got, want) in tape.data(y).iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn conv2d_rejects_non_integral_output() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(&[1, 5, 5]), false);
    let w = tape.leaf(&Tensor::zeros(&[1, 1, 2, 2]), false);
    let b = tape.leaf(&Tensor::zeros(&[1]), false);
    assert!(tape.conv2d(x, w, b, 2, 0).is_err());
}

// --- pooling ---------------------------------------------------------------

#[test]
fn pooling_examples() {
    let mut tape = Tape::new();
    let c = 2.5;
    let x = tape.leaf(&Tensor::full(&[3, 4, 4], c), false);
    let g = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.data(g), &[c, c, c]);

    let x = tape.leaf(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let mx = tape.max_pool2d(x, 2, 2, 1).unwrap();
    assert_eq!(tape.data(mx), &[4.0]);
    let av = tape.avg_pool2d(x, 2, 2, 1).unwrap();
    assert_eq!(tape.data(av), &[2.5]);
}

#[test]
fn pool_window_larger_than_input_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(&[1, 2, 2]), false);
    assert!(tape.max_pool2d(x, 3, 3, 1).is_err());
}

#[test]
fn max_pool_grad_routes_to_first_max_on_ties() {
    let mut store = ParamStore::new();
    store
        .insert("x", t(&[1, 2, 2], &[7.0, 7.0, 1.0, 0.0]), true)
        .unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, "x").unwrap();
    let y = tape.max_pool2d(x, 2, 2, 1).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    // Row-major first occurrence of the max gets the gradient.
    assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
}

// --- softmax ----------------------------------------------------------------

#[test]
fn softmax_contracts() {
    let mut tape = Tape::new();
    let one = tape.leaf(&Tensor::scalar(3.7), false);
    let y = tape.softmax(one, 0).unwrap();
    assert_eq!(tape.data(y), &[1.0]);

    let k = 7;
    let x = tape.leaf(&Tensor::full(&[k], 0.3), false);
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.data(y) {
        assert!((v - 1.0 / k as f64).abs() < 1e-15);
    }

    // Shift invariance within 1e-12, row sums within 1e-12.
    let mut rng = stream(9, StreamKind::ParamInit, 0, 0);
    let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let shifted: Vec<f64> = logits.iter().map(|v| v + 123.456).collect();
    let a = tape.leaf(&t(&[3, 4], &logits), false);
    let b = tape.leaf(&t(&[3, 4], &shifted), false);
    let ya = tape.softmax(a, 1).unwrap();
    let yb = tape.softmax(b, 1).unwrap();
    for (u, v) in tape.data(ya).iter().zip(tape.data(yb)) {
        assert!((u - v).abs() < 1e-12);
    }
    for row in 0..3 {
        let s: f64 = tape.data(ya)[row * 4..(row + 1) * 4].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(tape.data(ya)[row * 4..(row + 1) * 4]
            .iter()
            .all(|&p| p > 0.0 && p < 1.0));
    }
}

// --- structural -------------------------------------------------------------

#[test]
fn structural_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::full(&[2, 3, 3], 1.0), false);
    let b = tape.leaf(&Tensor::full(&[4, 3, 3], 2.0), false);
    let cat = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.shape(cat), &[6, 3, 3]);

    let x = tape.leaf(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let up = tape.upsample_nearest(x, 2).unwrap();
    assert_eq!(tape.shape(up), &[1, 4, 4]);
    assert_eq!(
        tape.data(up),
        &[
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ]
    );

    let orig = t(&[2, 6], &(0..12).map(|i| i as f64).collect::<Vec<_>>());
    let v = tape.leaf(&orig, false);
    let r1 = tape.reshape(v, &[3, 4]).unwrap();
    let r2 = tape.reshape(r1, &[2, 6]).unwrap();
    assert_eq!(tape.data(r2), orig.data());

    let bad = tape.concat(&[a, x], 0);
    assert!(bad.is_err());
}

// --- backward ----------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::full(&[2, 3], 0.7), true).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, "x").unwrap();
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut store = ParamStore::new();
    store.insert("x", t(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, "x").unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(&[2, 2]), true);
    assert!(tape.backward(x).is_err());
}

#[test]
fn grads_zeroed_at_backward_start() {
    let mut store = ParamStore::new();
    store.insert("x", t(&[2], &[1.0, 2.0]), true).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, "x").unwrap();
    let doubled = tape.mul_scalar(x, 2.0);
    let loss = tape.sum(doubled);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    // A second backward over the same tape starts from zeroed grads instead
    // of accumulating on top of the first pass.
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn two_layer_network_grad_check() {
    let mut rng = stream(42, StreamKind::ParamInit, 0, 0);
    let mut store = ParamStore::new();
    store
        .insert("w1", fan_in_uniform(&mut rng, &[4, 5], 4), true)
        .unwrap();
    store
        .insert("b1", fan_in_uniform(&mut rng, &[5], 4), true)
        .unwrap();
    store
        .insert("w2", fan_in_uniform(&mut rng, &[5, 2], 5), true)
        .unwrap();
    store
        .insert("b2", fan_in_uniform(&mut rng, &[2], 5), true)
        .unwrap();
    let input = t(&[3, 4], &kink_free(&mut rng, 12));

    let forward = move |store: &mut ParamStore| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let x = tape.leaf(&input, false);
        let w1 = tape.param(store, "w1")?;
        let b1 = tape.param(store, "b1")?;
        let w2 = tape.param(store, "w2")?;
        let b2 = tape.param(store, "b2")?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, w2)?;
        let out = tape.add_row_bias(out, b2)?;
        let sq = tape.mul(out, out)?;
        let loss = tape.mean(sq);
        Ok((tape, loss))
    };
    let err = grad_check(&mut store, 1e-5, forward).unwrap();
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let mut rng = stream(77, StreamKind::ParamInit, 1, 2);
        let mut store = ParamStore::new();
        store
            .insert("w", fan_in_uniform(&mut rng, &[6, 6], 6), true)
            .unwrap();
        let x = t(&[2, 6], &kink_free(&mut rng, 12));
        let mut tape = Tape::new();
        let xi = tape.leaf(&x, false);
        let w = tape.param(&store, "w").unwrap();
        let h = tape.matmul(xi, w).unwrap();
        let s = tape.sigmoid(h);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        (
            tape.data(loss).to_vec(),
            tape.grad(w).unwrap().data().to_vec(),
        )
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}

#[test]
fn shared_parameter_accumulates_gradient_from_both_uses() {
    let mut store = ParamStore::new();
    store.insert("w", t(&[1], &[3.0]), true).unwrap();
    let mut tape = Tape::new();
    let w1 = tape.param(&store, "w").unwrap();
    let w2 = tape.param(&store, "w").unwrap();
    assert_eq!(w1, w2);
    // loss = w * w -> dw = 2w = 6
    let prod = tape.mul(w1, w2).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w1).unwrap().data(), &[6.0]);
}
