use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resdistill::tensor::{grad_check, Graph, Mode, Tensor};
use resdistill::Error;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Uniform values whose magnitude is at least `gap`, so finite differences never straddle 0.
fn away_from_zero(shape: &[usize], gap: f64, r: &mut ChaCha8Rng) -> Tensor {
    let mut x = Tensor::uniform(shape, -1.0, 1.0, r);
    for v in x.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap - 0.01 } else { gap + 0.01 };
        }
    }
    x
}

fn named(items: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

#[test]
fn conv2d_sum_of_ones() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn conv2d_stride_two_shape() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.conv2d(x, k, None, 2, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
}

#[test]
fn conv2d_shape_errors_name_dimensions() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = g.conv2d(x, k, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("2 channels") && err.contains("expects 3"), "{err}");
    let small = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let err = g.conv2d(small, k, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("smaller than kernel"), "{err}");
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let point = named(vec![
        ("input", Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r)),
        ("kernel", Tensor::randn(&[4, 3, 3, 3], 0.5, &mut r)),
        ("bias", Tensor::randn(&[4], 0.5, &mut r)),
    ]);
    let report = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            g.sum(y)
        },
        &point,
        STEP,
        200,
        7,
    )
    .unwrap();
    assert!(report.max_rel_error <= TOL, "{report:?}");
}

#[test]
fn conv2d_strided_gradient_with_projection() {
    let mut r = rng(2);
    let proj = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let point = named(vec![
        ("input", Tensor::randn(&[2, 2, 9, 9], 1.0, &mut r)),
        ("kernel", Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r)),
    ]);
    let report = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 0)?;
            g.weighted_sum(y, &proj)
        },
        &point,
        STEP,
        200,
        8,
    )
    .unwrap();
    assert!(report.max_rel_error <= TOL, "{report:?}");
}

#[test]
fn relu_values() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let neg = g.constant(t(&[2, 2], &[-1.0, -2.0, -0.5, -9.0]));
    let y = g.relu(neg).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut r = rng(3);
    let x = away_from_zero(&[3, 5, 4], 1e-3, &mut r);
    let proj = Tensor::randn(&[3, 5, 4], 1.0, &mut r);
    let report = grad_check(
        |g, v| {
            let y = g.relu(v[0])?;
            g.weighted_sum(y, &proj)
        },
        &named(vec![("x", x)]),
        STEP,
        200,
        9,
    )
    .unwrap();
    assert!(report.max_rel_error <= TOL, "{report:?}");
}

#[test]
fn batch_norm_train_normalises() {
    let mut r = rng(4);
    let x = Tensor::randn(&[4, 3, 5, 5], 2.0, &mut r);
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let scale = g.constant(Tensor::full(&[3], 1.0));
    let shift = g.constant(Tensor::zeros(&[3]));
    let (y, stats) = g
        .batch_norm2d(xv, scale, shift, &Tensor::zeros(&[3]), &Tensor::full(&[3], 1.0), Mode::Train, 0.9, 1e-15)
        .unwrap();
    assert!(stats.is_some());
    let y = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> =
            (0..4).flat_map(|n| (0..25).map(move |i| (n, i))).map(|(n, i)| y.data()[(n * 3 + c) * 25 + i]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-9, "var {var}");
    }
}

#[test]
fn batch_norm_running_update_uses_momentum() {
    let x = t(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 7.0]);
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let scale = g.constant(Tensor::full(&[1], 1.0));
    let shift = g.constant(Tensor::zeros(&[1]));
    let (_, stats) = g
        .batch_norm2d(xv, scale, shift, &Tensor::zeros(&[1]), &Tensor::full(&[1], 1.0), Mode::Train, 0.9, 1e-5)
        .unwrap();
    let (mean, var) = stats.unwrap();
    // batch mean 4, unbiased variance 20/3
    assert!((mean.item() - 0.4).abs() < 1e-12);
    assert!((var.item() - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn batch_norm_eval_identity() {
    let mut r = rng(5);
    let x = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let scale = g.constant(Tensor::full(&[2], 1.0));
    let shift = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g
        .batch_norm2d(xv, scale, shift, &Tensor::zeros(&[2]), &Tensor::full(&[2], 1.0), Mode::Eval, 0.9, 1e-5)
        .unwrap();
    assert!(stats.is_none());
    // the only deviation is the epsilon in 1/sqrt(1 + eps), i.e. about 5e-6·|x|
    let shrink = 1.0 / (1.0 + 1e-5f64).sqrt();
    for (out, inp) in g.value(y).data().iter().zip(x.data()) {
        assert!((out - inp * shrink).abs() <= 1e-15);
        assert!((out - inp).abs() <= 5.1e-6 * inp.abs());
    }
}

#[test]
fn batch_norm_rejects_single_value_batches() {
    let mut g = Graph::inference();
    let xv = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
    let scale = g.constant(Tensor::full(&[2], 1.0));
    let shift = g.constant(Tensor::zeros(&[2]));
    let err = g
        .batch_norm2d(xv, scale, shift, &Tensor::zeros(&[2]), &Tensor::full(&[2], 1.0), Mode::Train, 0.9, 1e-5)
        .unwrap_err();
    assert!(err.to_string().contains("larger batch"), "{err}");
}

#[test]
fn batch_norm_gradients_both_modes() {
    let mut r = rng(6);
    let proj = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut r);
    let running_mean = Tensor::randn(&[2], 0.3, &mut r);
    let running_var = Tensor::uniform(&[2], 0.5, 1.5, &mut r);
    let point = named(vec![
        ("x", Tensor::randn(&[3, 2, 4, 4], 1.0, &mut r)),
        ("scale", Tensor::uniform(&[2], 0.5, 1.5, &mut r)),
        ("shift", Tensor::randn(&[2], 0.5, &mut r)),
    ]);
    for mode in [Mode::Train, Mode::Eval] {
        let report = grad_check(
            |g, v| {
                let (y, _) = g.batch_norm2d(v[0], v[1], v[2], &running_mean, &running_var, mode, 0.9, 1e-5)?;
                g.weighted_sum(y, &proj)
            },
            &point,
            STEP,
            200,
            10,
        )
        .unwrap();
        assert!(report.max_rel_error <= TOL, "{mode:?}: {report:?}");
    }
}

#[test]
fn global_avg_pool_values_and_gradient() {
    let mut g = Graph::inference();
    let c = g.constant(Tensor::full(&[2, 3, 4, 5], 1.75));
    let y = g.global_avg_pool(c).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 1.75));
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).item(), 2.5);

    let mut r = rng(11);
    let proj = Tensor::randn(&[2, 3], 1.0, &mut r);
    let x = Tensor::randn(&[2, 3, 3, 5], 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = g.global_avg_pool(xv).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(xv).unwrap().data().iter().all(|&v| (v - 1.0 / 15.0).abs() < 1e-15));
    let report = grad_check(
        |g, v| {
            let y = g.global_avg_pool(v[0])?;
            g.weighted_sum(y, &proj)
        },
        &named(vec![("x", x)]),
        STEP,
        200,
        12,
    )
    .unwrap();
    assert!(report.max_rel_error <= TOL, "{report:?}");
}

#[test]
fn linear_values_and_gradient() {
    let mut r = rng(13);
    let x = Tensor::randn(&[3, 4], 1.0, &mut r);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 5] = 1.0;
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let w = g.constant(eye);
    let b = g.constant(Tensor::zeros(&[4]));
    let y = g.linear(xv, w, Some(b)).unwrap();
    assert_eq!(g.value(y), &x);
    let zw = g.constant(Tensor::zeros(&[2, 4]));
    let bias = g.constant(t(&[2], &[0.5, -1.5]));
    let y = g.linear(xv, zw, Some(bias)).unwrap();
    for i in 0..3 {
        assert_eq!(g.value(y).row(i), &[0.5, -1.5]);
    }
    let bad = g.constant(Tensor::zeros(&[2, 5]));
    assert!(matches!(g.linear(xv, bad, None), Err(Error::Shape { .. })));

    let proj = Tensor::randn(&[3, 5], 1.0, &mut r);
    let point = named(vec![
        ("x", x),
        ("w", Tensor::randn(&[5, 4], 1.0, &mut r)),
        ("b", Tensor::randn(&[5], 1.0, &mut r)),
    ]);
    let report = grad_check(
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            g.weighted_sum(y, &proj)
        },
        &point,
        STEP,
        200,
        14,
    )
    .unwrap();
    assert!(report.max_rel_error <= TOL, "{report:?}");
}

#[test]
fn l2_normalize_values_and_gradient() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
    let y = g.l2_normalize(x, 1e-12).unwrap();
    let y = g.value(y);
    assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
    assert_eq!(&y.data()[2..], &[0.0, 0.0]);

    let mut r = rng(15);
    let proj = Tensor::randn(&[4, 6], 1.0, &mut r);
    let report = grad_check(
        |g, v| {
            let y = g.l2_normalize(v[0], 1e-12)?;
            g.weighted_sum(y, &proj)
        },
        &named(vec![("x", Tensor::randn(&[4, 6], 1.0, &mut r))]),
        STEP,
        200,
        16,
    )
    .unwrap();
    assert!(report.max_rel_error <= TOL, "{report:?}");
}

#[test]
fn squared_distance_mean_values_and_gradient() {
    let mut r = rng(17);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[3, 4], 1.0, &mut r);
    let mut g = Graph::new();
    let av = g.param(a.clone());
    let same = g.constant(a.clone());
    let z = g.squared_distance_mean(av, same).unwrap();
    assert_eq!(g.value(z).item(), 0.0);
    let e1 = g.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
    let zero = g.constant(Tensor::zeros(&[1, 3]));
    let one = g.squared_distance_mean(e1, zero).unwrap();
    assert_eq!(g.value(one).item(), 1.0);

    let bv = g.constant(b.clone());
    let l = g.squared_distance_mean(av, bv).unwrap();
    let grads = g.backward(l).unwrap();
    let ga = grads.get(av).unwrap();
    for i in 0..a.len() {
        let want = 2.0 / 3.0 * (a.data()[i] - b.data()[i]);
        assert!((ga.data()[i] - want).abs() < 1e-14);
    }
    assert!(grads.get(bv).is_none());

    let report = grad_check(
        |g, v| g.squared_distance_mean(v[0], v[1]),
        &named(vec![("a", a), ("b", b)]),
        STEP,
        200,
        18,
    )
    .unwrap();
    assert!(report.max_rel_error <= TOL, "{report:?}");
}

#[test]
fn backward_sum_and_detached_parameter() {
    let mut g = Graph::new();
    let p = g.param(Tensor::full(&[2, 3], 0.3));
    let detached = g.param(Tensor::full(&[4], 1.0));
    let l = g.sum(p).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(grads.get(detached).is_none());
    assert_eq!(grads.get_or_zeros(&g, detached), Tensor::zeros(&[4]));
    assert!(g.backward(p).is_err(), "non-scalar loss must be rejected");
}

#[test]
fn non_finite_outputs_are_reported() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::full(&[1, 2], f64::MAX));
    let err = g.scale(x, 10.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn grad_check_on_closed_forms() {
    let mut r = rng(19);
    let theta = named(vec![("theta", Tensor::uniform(&[1, 20], 0.5, 1.5, &mut r))]);
    // ‖θ‖² as the squared distance of a single row to the origin
    let quad = grad_check(
        |g, v| {
            let zero = g.constant(Tensor::zeros(&[1, 20]));
            g.squared_distance_mean(v[0], zero)
        },
        &theta,
        1e-5,
        200,
        1,
    )
    .unwrap();
    assert!(quad.max_rel_error <= 1e-8, "{quad:?}");
    let lin = grad_check(|g, v| g.sum(v[0]), &theta, 1e-5, 200, 2).unwrap();
    assert!(lin.max_rel_error <= 1e-9, "{lin:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_output_shape_formula(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..12, w in 3usize..12,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, pad in 0usize..3,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(&[n, c, h, w], 0.5));
        let kv = g.constant(Tensor::full(&[o, c, k, k], 0.1));
        let y = g.conv2d(x, kv, None, stride, pad).unwrap();
        let expect = [n, o, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1];
        prop_assert_eq!(g.value(y).shape(), &expect[..]);
    }

    #[test]
    fn conv_and_pool_are_linear(seed in 0u64..1000, a in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut r);
        let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let mut ax = x.clone();
        for v in ax.data_mut() { *v *= a; }
        let mut g = Graph::inference();
        let kv = g.constant(k);
        let xv = g.constant(x);
        let axv = g.constant(ax);
        let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
        let ay = g.conv2d(axv, kv, None, 1, 1).unwrap();
        for (p, q) in g.value(y).data().iter().zip(g.value(ay).data()) {
            prop_assert!((a * p - q).abs() <= 1e-12 * (1.0 + p.abs()));
        }
        let py = g.global_avg_pool(xv).unwrap();
        let pay = g.global_avg_pool(axv).unwrap();
        for (p, q) in g.value(py).data().iter().zip(g.value(pay).data()) {
            prop_assert!((a * p - q).abs() <= 1e-12 * (1.0 + p.abs()));
        }
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut r = rng(21);
        let mut g = Graph::new();
        let x = g.param(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r));
        let k = g.param(Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r));
        let y = g.conv2d(x, k, None, 2, 1).unwrap();
        let y = g.relu(y).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).item(), grads.get(k).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}
