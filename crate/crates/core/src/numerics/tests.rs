use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn gelu_fixed_point_at_origin() {
    let mut g = Graph::<f32>::no_grad();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let y = g.gelu(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    for c in [-40.0f64, 0.0, 3.5, 700.0] {
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::full(&[1, 3], c));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = rand_tensor(&mut rng, &[3, 3]);
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut g = Graph::no_grad();
    let a = g.constant(eye);
    let b = g.constant(m.clone());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &m);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    assert!(g.add(a, b).is_err());
}

#[test]
fn non_finite_results_are_rejected() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::full(&[1, 2], f32::MAX));
    let err = g.scale(a, 10.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "scale" }));
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_of_mse_against_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1], vec![3.0f64]).unwrap(), true);
    let z = g.constant(Tensor::zeros(&[1]));
    let loss = g.mse(x, z).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_rejects_bad_losses() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    let y = g.scale(x, 2.0f64).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Backward(_))));

    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(1.0f64));
    assert!(matches!(g.backward(c), Err(Error::Backward(_))));
}

#[test]
fn gradients_accumulate_across_uses() {
    // loss = sum(x) + sum(3x) → grad = 4 everywhere
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2, 2], 0.5f64), true);
    let a = g.sum(x).unwrap();
    let x3 = g.scale(x, 3.0).unwrap();
    let b = g.sum(x3).unwrap();
    let loss = g.add(a, b).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 4.0));
}

#[test]
fn param_grads_sum_over_leaves() {
    let p = Tensor::full(&[1, 2], 1.0f64);
    let mut g = Graph::new();
    let a = g.param(&p, 0);
    let b = g.param(&p, 0);
    let s = g.add(a, b).unwrap();
    let loss = g.sum(s).unwrap();
    let grads = g.backward(loss).unwrap().param_grads(2);
    assert_eq!(grads[0].as_ref().unwrap().data(), &[2.0, 2.0]);
    assert!(grads[1].is_none());
}

#[test]
fn no_grad_tape_records_nothing() {
    let mut g = Graph::<f64>::no_grad();
    let x = g.leaf(Tensor::full(&[2], 1.0), true);
    assert!(!g.requires_grad(x));
    let s = g.sum(x).unwrap();
    assert!(g.backward(s).is_err());
}

#[test]
fn forward_and_gradients_are_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f32>::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn(&[5, 3], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let av = g.leaf(a, false);
        let wv = g.leaf(w, true);
        let h = g.matmul(av, wv).unwrap();
        let h = g.gelu(h).unwrap();
        let s = g.softmax(h).unwrap();
        let loss = g.sum(s).unwrap();
        let value = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        (value.to_bits(), grads.get(wv).unwrap().clone())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1, v2);
    assert_eq!(g1, g2);
}

#[test]
fn every_op_matches_finite_differences_over_twenty_seeds() {
    for case in op_suite() {
        for seed in 0..20u64 {
            let report = case.check(seed, 1e-4).unwrap();
            assert!(report.passed(), "{} seed {seed}: {:?}", case.name, report.failures());
        }
    }
}

#[test]
fn linear_layer_gradients_are_tight() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = vec![
            ("x".to_string(), rand_tensor(&mut rng, &[4, 3])),
            ("w".to_string(), rand_tensor(&mut rng, &[3, 5])),
            ("b".to_string(), rand_tensor(&mut rng, &[5])),
        ];
        let report = check_gradients(
            &inputs,
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_row(h, v[2])?;
                let t = g.constant(Tensor::full(&[4, 5], 0.25));
                g.mse(h, t)
            },
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.blocks);
    }
}

#[test]
fn layer_norm_at_constant_input_has_no_gradient_along_the_constant_direction() {
    let x = Tensor::full(&[1, 5], 0.8f64);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let gain = g.constant(Tensor::from_fn(&[5], |i| 1.0 + i as f64 * 0.1));
    let bias = g.constant(Tensor::zeros(&[5]));
    let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
    let w = g.constant(Tensor::from_fn(&[1, 5], |i| i as f64 - 2.0));
    let p = g.mul(y, w).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    let along: f64 = grads.get(xv).unwrap().data().iter().sum();
    assert!(along.abs() < 1e-9, "{along}");

    let inputs = vec![("x".to_string(), x)];
    let report = check_gradients(
        &inputs,
        |g, v| {
            let gain = g.constant(Tensor::from_fn(&[5], |i| 1.0 + i as f64 * 0.1));
            let bias = g.constant(Tensor::zeros(&[5]));
            let y = g.layer_norm(v[0], gain, bias, 1e-5)?;
            let w = g.constant(Tensor::from_fn(&[1, 5], |i| i as f64 - 2.0));
            let p = g.mul(y, w)?;
            g.sum(p)
        },
        1e-4,
        None,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.blocks);
}

#[test]
fn two_layer_net_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let inputs = vec![
            ("x".to_string(), rand_tensor(&mut rng, &[3, 4])),
            ("w1".to_string(), rand_tensor(&mut rng, &[4, 6])),
            ("b1".to_string(), rand_tensor(&mut rng, &[6])),
            ("w2".to_string(), rand_tensor(&mut rng, &[6, 2])),
        ];
        let report = check_gradients(
            &inputs,
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_row(h, v[2])?;
                let h = g.gelu(h)?;
                let y = g.matmul(h, v[3])?;
                let t = g.constant(Tensor::full(&[3, 2], 0.1));
                g.mse(y, t)
            },
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {:?}", report.blocks);
    }
}
