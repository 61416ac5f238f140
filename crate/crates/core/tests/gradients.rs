//! Analytic gradients against central finite differences, op by op and for
//! the whole model.

mod common;

use common::model_worst_error;
use eaten::attention::AttentionNorm;
use eaten::numerics::*;
use eaten::training::smoothed_cross_entropy;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Fixed random projection `Σ w_i y_i` used to turn a tensor output into a
/// scalar objective; returns the objective and its gradient `w`.
fn probe(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_matmul(seed: u64, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![rand_tensor(&[m, k], &mut rng), rand_tensor(&[k, n], &mut rng)];
    let w = probe(m * n, seed);
    let go = Tensor::new(&[m, n], w.clone()).unwrap();
    let (a, b) = params.split_at_mut(1);
    matmul_backward(&mut a[0], &mut b[0], &go).unwrap();
    finite_diff_check(|p: &Vec<Tensor>| dot(matmul(&p[0], &p[1]).unwrap().data(), &w), &mut params, STEP).unwrap()
}

fn check_conv(seed: u64, h: usize, w: usize, c_in: usize, c_out: usize, stride: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![rand_tensor(&[h, w, c_in], &mut rng), rand_tensor(&[3, 3, c_in, c_out], &mut rng)];
    let out_len = conv2d(&params[0], &params[1], stride).unwrap().len();
    let probe_w = probe(out_len, seed);
    let out = conv2d(&params[0], &params[1], stride).unwrap();
    let go = Tensor::new(out.shape(), probe_w.clone()).unwrap();
    let (a, b) = params.split_at_mut(1);
    conv2d_backward(&mut a[0], &mut b[0], stride, &go).unwrap();
    finite_diff_check(
        |p: &Vec<Tensor>| dot(conv2d(&p[0], &p[1], stride).unwrap().data(), &probe_w),
        &mut params,
        STEP,
    )
    .unwrap()
}

fn check_softmax(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![rand_tensor(&[n], &mut rng)];
    let w = probe(n, seed);
    let y = softmax(&params[0]).unwrap();
    softmax_backward(&mut params[0], &y, &Tensor::from_vec(w.clone())).unwrap();
    finite_diff_check(|p: &Vec<Tensor>| dot(softmax(&p[0]).unwrap().data(), &w), &mut params, STEP).unwrap()
}

fn check_unary(op: Unary, seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![rand_tensor(&[n], &mut rng)];
    let w = probe(n, seed);
    let y = unary(op, &params[0]);
    unary_backward(op, &mut params[0], &y, &Tensor::from_vec(w.clone())).unwrap();
    finite_diff_check(|p: &Vec<Tensor>| dot(unary(op, &p[0]).data(), &w), &mut params, STEP).unwrap()
}

fn check_binary(op: Binary, seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![rand_tensor(&[n, n], &mut rng), rand_tensor(&[n, n], &mut rng)];
    let w = probe(n * n, seed);
    let go = Tensor::new(&[n, n], w.clone()).unwrap();
    let (a, b) = params.split_at_mut(1);
    binary_backward(op, &mut a[0], &mut b[0], &go).unwrap();
    finite_diff_check(|p: &Vec<Tensor>| dot(binary(op, &p[0], &p[1]).unwrap().data(), &w), &mut params, STEP).unwrap()
}

fn worst(errs: &[f64]) -> f64 {
    errs.iter().copied().fold(0.0, f64::max)
}

#[test]
fn matmul_3x4_by_4x2() {
    assert!(worst(&check_matmul(1, 3, 4, 2)) < 1e-6);
}

#[test]
fn softmax_jacobian_length_7() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = softmax(&Tensor::from_vec(x.clone())).unwrap();
    for j in 0..7 {
        let mut go = vec![0.0; 7];
        go[j] = 1.0;
        let mut xt = Tensor::from_vec(x.clone());
        softmax_backward(&mut xt, &y, &Tensor::from_vec(go)).unwrap();
        for i in 0..7 {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[i] += STEP;
            minus[i] -= STEP;
            let num = (softmax(&Tensor::from_vec(plus)).unwrap().data()[j]
                - softmax(&Tensor::from_vec(minus)).unwrap().data()[j])
                / (2.0 * STEP);
            assert!((xt.grad().unwrap()[i] - num).abs() < 1e-7);
        }
    }
}

#[test]
fn conv_5x5x2_with_3x3x2x3_kernel() {
    assert!(worst(&check_conv(3, 5, 5, 2, 3, 1)) < 1e-5);
    assert!(worst(&check_conv(4, 5, 5, 2, 3, 2)) < 1e-5);
}

#[test]
fn elementwise_mul_4x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&[4, 4], &mut rng);
    let b = rand_tensor(&[4, 4], &mut rng);
    let w = probe(16, 5);
    let (mut at, mut bt) = (a.clone(), b.clone());
    binary_backward(Binary::Mul, &mut at, &mut bt, &Tensor::new(&[4, 4], w.clone()).unwrap()).unwrap();
    for i in 0..16 {
        let mut p = a.clone();
        let mut m = a.clone();
        p.data_mut()[i] += STEP;
        m.data_mut()[i] -= STEP;
        let f = |x: &Tensor| dot(binary(Binary::Mul, x, &b).unwrap().data(), &w);
        let num = (f(&p) - f(&m)) / (2.0 * STEP);
        assert!((at.grad().unwrap()[i] - num).abs() < 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>(), a in 1usize..5, b in 1usize..5, c in 1usize..4) {
        prop_assert!(worst(&check_matmul(seed, a, b, c)) < 1e-4);
        prop_assert!(worst(&check_softmax(seed, a + b)) < 1e-4);
        prop_assert!(worst(&check_unary(Unary::Tanh, seed, a * b)) < 1e-4);
        prop_assert!(worst(&check_unary(Unary::Sigmoid, seed, a * b)) < 1e-4);
        prop_assert!(worst(&check_binary(Binary::Add, seed, a)) < 1e-4);
        prop_assert!(worst(&check_binary(Binary::Mul, seed, a)) < 1e-4);
        prop_assert!(worst(&check_conv(seed, a + 2, b + 2, c, a, 1 + seed as usize % 2)) < 1e-4);
    }

    #[test]
    fn smoothed_cross_entropy_gradient(seed in any::<u64>(), v in 2usize..12, eps in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = rng.gen_range(0..v);
        let (_, g) = smoothed_cross_entropy(&x, y, eps);
        for i in 0..v {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += STEP;
            m[i] -= STEP;
            let num = (smoothed_cross_entropy(&p, y, eps).0 - smoothed_cross_entropy(&m, y, eps).0) / (2.0 * STEP);
            prop_assert!(relative_error(g[i], num) < 1e-5, "{} vs {}", g[i], num);
        }
    }
}

#[test]
fn full_model_with_state_transition() {
    let (e, name) = model_worst_error(&common::toy_model(true, AttentionNorm::Softmax), 0.1);
    assert!(e < 1e-4, "worst {e} at {name}");
}

#[test]
fn full_model_without_state_transition() {
    let (e, name) = model_worst_error(&common::toy_model(false, AttentionNorm::Softmax), 0.0);
    assert!(e < 1e-4, "worst {e} at {name}");
}

#[test]
fn full_model_with_ratio_attention() {
    let (e, name) = model_worst_error(&common::toy_model(true, AttentionNorm::Ratio), 0.1);
    assert!(e < 1e-4, "worst {e} at {name}");
}
