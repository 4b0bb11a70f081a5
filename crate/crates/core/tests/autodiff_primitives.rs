use cpgm::autodiff::{finite_difference_check, BnMode, GradCheckOptions, ParameterSet, Tape, Tensor, Var};
use cpgm::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn params(entries: &[(&str, Tensor)]) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (n, t) in entries {
        p.insert(*n, t.clone()).unwrap();
    }
    p
}

/// Weighted sum so every output coordinate matters to the checked scalar.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(tape.shape(v), |_| rng.random_range(-1.0..1.0));
    let w = tape.constant(&w);
    let prod = tape.mul(v, w).unwrap();
    tape.sum(prod)
}

fn full_check(p: &ParameterSet, f: impl FnMut(&ParameterSet, &mut Tape) -> cpgm::Result<Var>) -> f64 {
    let opts = GradCheckOptions { step: 1e-5, coords_per_param: usize::MAX, seed: 1 };
    let report = finite_difference_check(f, p, opts).unwrap();
    assert!(report.flagged.is_empty(), "{report:?}");
    report.max_rel_error
}

#[test]
fn conv2d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::ones(&[1, 1, 3, 3]));
    let w = tape.constant(&Tensor::ones(&[1, 1, 1, 1]));
    let b = tape.constant(&Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    assert_eq!(tape.value(y), &[1.0; 9]);
}

#[test]
fn conv2d_summation_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = tape.constant(&Tensor::ones(&[1, 1, 2, 2]));
    let b = tape.constant(&Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y), &[10.0]);
}

#[test]
fn conv2d_output_size_and_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[2, 3, 16, 16]));
    let w = tape.constant(&Tensor::zeros(&[8, 3, 3, 3]));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 8, 8, 8]);
    let bad = tape.constant(&Tensor::zeros(&[8, 2, 3, 3]));
    assert!(matches!(tape.conv2d(x, bad, None, 1, 0), Err(Error::Shape(_))));
    let big = tape.constant(&Tensor::zeros(&[1, 3, 20, 20]));
    assert!(matches!(tape.conv2d(x, big, None, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = params(&[
        ("x", rand_tensor(&[1, 2, 5, 5], &mut rng)),
        ("w", rand_tensor(&[3, 2, 3, 3], &mut rng)),
        ("b", rand_tensor(&[3], &mut rng)),
    ]);
    for (stride, padding) in [(1, 0), (2, 1), (1, 1)] {
        let err = full_check(&p, |p, t| {
            let (x, w, b) = (t.param(p, "x")?, t.param(p, "w")?, t.param(p, "b")?);
            let y = t.conv2d(x, w, Some(b), stride, padding)?;
            Ok(weighted_sum(t, y, 3))
        });
        assert!(err < 1e-4, "stride {stride} padding {padding}: {err}");
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, padding, out_pad, h) in [(1, 0, 0, 5), (2, 1, 1, 4), (2, 0, 0, 7), (3, 1, 2, 5)] {
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let y = rand_tensor(&[2, 4, h, h], &mut rng);
        let mut tape = Tape::new();
        let (yv, wv) = (tape.constant(&y), tape.constant(&w));
        let xt = tape.conv_transpose2d(yv, wv, None, stride, padding, out_pad).unwrap();
        let xs = tape.shape(xt).to_vec();
        let x = rand_tensor(&xs, &mut rng);
        let xv = tape.constant(&x);
        let cx = tape.conv2d(xv, wv, None, stride, padding).unwrap();
        assert_eq!(tape.shape(cx), y.shape(), "conv of the transposed shape returns to the start");
        let lhs = tape.tensor(cx).dot(&y).unwrap();
        let rhs = x.dot(&tape.tensor(xt)).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[1, 1, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let w = tape.constant(&Tensor::ones(&[1, 1, 1, 1]));
    let b = tape.constant(&Tensor::zeros(&[1]));
    let y = tape.conv_transpose2d(xv, w, Some(b), 1, 0, 0).unwrap();
    assert_eq!(tape.tensor(y).data(), x.data());
    let bad = tape.constant(&Tensor::ones(&[2, 1, 1, 1]));
    assert!(tape.conv_transpose2d(xv, bad, None, 1, 0, 0).is_err());
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = params(&[
        ("x", rand_tensor(&[2, 3, 3, 3], &mut rng)),
        ("w", rand_tensor(&[3, 2, 3, 3], &mut rng)),
        ("b", rand_tensor(&[2], &mut rng)),
    ]);
    let err = full_check(&p, |p, t| {
        let (x, w, b) = (t.param(p, "x")?, t.param(p, "w")?, t.param(p, "b")?);
        let y = t.conv_transpose2d(x, w, Some(b), 2, 1, 1)?;
        Ok(weighted_sum(t, y, 4))
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn linear_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let w = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap());
    let b = tape.constant(&Tensor::zeros(&[2]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y), &[3.0, 2.0]);

    let eye = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = tape.linear(x, eye, Some(b)).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0]);

    let wrong = tape.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.linear(x, wrong, None), Err(Error::Shape(_))));
}

#[test]
fn linear_and_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = params(&[
        ("x", rand_tensor(&[3, 4], &mut rng)),
        ("w", rand_tensor(&[5, 4], &mut rng)),
        ("b", rand_tensor(&[5], &mut rng)),
        ("m", rand_tensor(&[5, 2], &mut rng)),
    ]);
    let err = full_check(&p, |p, t| {
        let (x, w, b, m) = (t.param(p, "x")?, t.param(p, "w")?, t.param(p, "b")?, t.param(p, "m")?);
        let y = t.linear(x, w, Some(b))?;
        let z = t.matmul(y, m)?;
        Ok(weighted_sum(t, z, 5))
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn softplus_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![4], vec![0.0, 100.0, -100.0, 800.0]).unwrap());
    let y = tape.softplus(x);
    let v = tape.value(y);
    assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((v[1] - 100.0).abs() < 1e-12);
    assert!(v[2] > 0.0 && v[2] < 1e-40);
    assert!((v[3] - 800.0).abs() < 1e-12);

    // Gradient equals the logistic sigmoid.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs = Tensor::from_fn(&[16], |_| rng.random_range(-6.0..6.0));
    let mut tape = Tape::new();
    let xv = tape.input(&xs);
    let y = tape.softplus(xv);
    let s = tape.sum(y);
    let g = tape.gradients(s).unwrap();
    for (gi, &x) in g.get(xv).unwrap().iter().zip(xs.data()) {
        assert!((gi - 1.0 / (1.0 + (-x).exp())).abs() < 1e-12);
    }
    let p = params(&[("x", xs)]);
    let err = full_check(&p, |p, t| {
        let x = t.param(p, "x")?;
        let y = t.softplus(x);
        Ok(t.sum(y))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![3, 2], vec![0.0, 0.0, 1000.0, 1000.0, 0.0, 3f64.ln()]).unwrap());
    let y = tape.softmax(x).unwrap();
    let v = tape.value(y);
    for (got, want) in v.iter().zip([0.5, 0.5, 0.5, 0.5, 0.25, 0.75]) {
        assert!((got - want).abs() < 1e-15, "{v:?}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_normalized_and_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..8), 1..5),
        shift in -500.0f64..500.0,
    ) {
        let k = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().filter(|r| r.len() == k).collect();
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let shifted: Vec<f64> = flat.iter().map(|v| v + shift).collect();
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::new(vec![n, k], flat).unwrap());
        let b = tape.constant(&Tensor::new(vec![n, k], shifted).unwrap());
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        for row in tape.value(sa).chunks(k) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (x, y) in tape.value(sa).iter().zip(tape.value(sb)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_unflatten_are_inverse(n in 1usize..4, c in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let t = Tensor::from_fn(&[n, c, h, w], |i| i as f64 * 0.5);
        let mut tape = Tape::new();
        let x = tape.constant(&t);
        let f = tape.flatten(x).unwrap();
        prop_assert_eq!(tape.shape(f), &[n, c * h * w]);
        let u = tape.unflatten(f, &[n, c, h, w]).unwrap();
        prop_assert_eq!(tape.tensor(u), t.clone());
        let f2 = tape.flatten(u).unwrap();
        prop_assert_eq!(tape.value(f2), tape.value(f));
    }
}

#[test]
fn softmax_and_log_softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = params(&[("x", rand_tensor(&[3, 4], &mut rng))]);
    let err = full_check(&p, |p, t| {
        let x = t.param(p, "x")?;
        let s = t.softmax(x)?;
        let ls = t.log_softmax(x)?;
        let a = weighted_sum(t, s, 1);
        let g = t.gather(ls, &[0, 3, 1])?;
        let b = t.sum(g);
        t.add(a, b)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn prelu_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![1, 1], vec![-2.0]).unwrap());
    let s = tape.constant(&Tensor::new(vec![1], vec![0.25]).unwrap());
    let y = tape.prelu(x, s).unwrap();
    assert_eq!(tape.value(y), &[-0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = params(&[
        ("x", rand_tensor(&[2, 3, 2, 2], &mut rng)),
        ("s", Tensor::new(vec![3], vec![0.25, 0.1, -0.3]).unwrap()),
        ("s1", Tensor::new(vec![1], vec![0.2]).unwrap()),
    ]);
    let err = full_check(&p, |p, t| {
        let (x, s, s1) = (t.param(p, "x")?, t.param(p, "s")?, t.param(p, "s1")?);
        let y = t.prelu(x, s)?;
        let z = t.prelu(y, s1)?;
        Ok(weighted_sum(t, z, 8))
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn batchnorm_training_normalizes_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(&[4, 3, 2, 2], |i| rng.random_range(-3.0..5.0) + (i % 3) as f64);
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let g = tape.constant(&Tensor::ones(&[3]));
    let b = tape.constant(&Tensor::zeros(&[3]));
    let (y, stats) = tape.batchnorm(xv, g, b, BnMode::Train).unwrap();
    let stats = stats.unwrap();
    let v = tape.value(y);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..4).map(move |k| (n * 3 + ch) * 4 + k)).map(|i| v[i]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-6);
        // The epsilon in the denominator shrinks the variance by var/(var+eps).
        let expect = stats.var[ch] / (stats.var[ch] + cpgm::autodiff::BN_EPS);
        assert!((var - expect).abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batchnorm_single_sample_is_degenerate() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[1, 2, 2, 2]));
    let g = tape.constant(&Tensor::ones(&[2]));
    let b = tape.constant(&Tensor::zeros(&[2]));
    assert!(matches!(tape.batchnorm(x, g, b, BnMode::Train), Err(Error::DegenerateBatch(_))));
    let (mean, var) = ([0.0, 0.0], [1.0, 1.0]);
    assert!(tape.batchnorm(x, g, b, BnMode::Eval { mean: &mean, var: &var }).is_ok());
}

#[test]
fn batchnorm_gradients_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = params(&[
        ("x", rand_tensor(&[3, 2, 2, 2], &mut rng)),
        ("g", Tensor::new(vec![2], vec![1.3, 0.7]).unwrap()),
        ("b", Tensor::new(vec![2], vec![0.1, -0.2]).unwrap()),
        ("x2", rand_tensor(&[4, 3], &mut rng)),
        ("g2", Tensor::new(vec![3], vec![1.0, 0.5, 2.0]).unwrap()),
        ("b2", Tensor::zeros(&[3])),
    ]);
    let err = full_check(&p, |p, t| {
        let (x, g, b) = (t.param(p, "x")?, t.param(p, "g")?, t.param(p, "b")?);
        let (y, _) = t.batchnorm(x, g, b, BnMode::Train)?;
        let (mean, var) = ([0.2, -0.1], [0.5, 2.0]);
        let (z, _) = t.batchnorm(y, g, b, BnMode::Eval { mean: &mean, var: &var })?;
        let (x2, g2, b2) = (t.param(p, "x2")?, t.param(p, "g2")?, t.param(p, "b2")?);
        let (y2, _) = t.batchnorm(x2, g2, b2, BnMode::Train)?;
        let a = weighted_sum(t, z, 9);
        let c = weighted_sum(t, y2, 10);
        t.add(a, c)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = params(&[
        ("a", Tensor::from_fn(&[2, 3], |_| rng.random_range(0.5..2.0))),
        ("b", Tensor::from_fn(&[2, 3], |_| rng.random_range(0.5..2.0))),
        ("c", rand_tensor(&[2, 2], &mut rng)),
    ]);
    let err = full_check(&p, |p, t| {
        let (a, b, c) = (t.param(p, "a")?, t.param(p, "b")?, t.param(p, "c")?);
        let q = t.div(a, b)?;
        let l = t.ln(q);
        let e = t.exp(l);
        let s = t.sqrt(e);
        let m = t.mul(s, a)?;
        let d = t.sub(m, b)?;
        let sg = t.sigmoid(d);
        let sc = t.scale(sg, 3.0);
        let cl = t.clamp(sc, 0.1, 2.9);
        let rows = t.sum_rows(cl)?;
        let cat = t.concat(a, c)?;
        let cat_rows = t.sum_rows(cat)?;
        let sq = t.square(cat_rows);
        let both = t.add(rows, sq)?;
        Ok(weighted_sum(t, both, 2))
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn reparameterize_contract() {
    let mu = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let m = tape.constant(&mu);
    let zero = tape.constant(&Tensor::zeros(&[3]));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = tape.reparameterize(m, zero, &mut rng).unwrap();
    assert_eq!(tape.value(z), mu.data());

    let neg = tape.constant(&Tensor::new(vec![3], vec![1.0, -0.1, 1.0]).unwrap());
    assert!(matches!(tape.reparameterize(m, neg, &mut rng), Err(Error::Domain(_))));

    let draw = |seed| {
        let mut tape = Tape::new();
        let m = tape.constant(&mu);
        let v = tape.constant(&Tensor::ones(&[3]));
        let z = tape.reparameterize(m, v, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        tape.value(z).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(draw(42), draw(42));
    assert_ne!(draw(42), draw(43));
}

#[test]
fn reparameterize_monte_carlo_mean() {
    let n = 100_000;
    let (mu, var) = (0.7, 2.5);
    let mut tape = Tape::new();
    let m = tape.constant(&Tensor::filled(&[n], mu));
    let v = tape.constant(&Tensor::filled(&[n], var));
    let z = tape.reparameterize(m, v, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let mean = tape.value(z).iter().sum::<f64>() / n as f64;
    assert!((mean - mu).abs() < 3.0 * (var / n as f64).sqrt(), "{mean}");
}

#[test]
fn reparameterize_gradients_flow_to_mean_and_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = params(&[
        ("mu", rand_tensor(&[2, 3], &mut rng)),
        ("v", Tensor::from_fn(&[2, 3], |_| rng.random_range(0.2..2.0))),
    ]);
    let err = full_check(&p, |p, t| {
        let (mu, v) = (t.param(p, "mu")?, t.param(p, "v")?);
        let z = t.reparameterize(mu, v, &mut ChaCha8Rng::seed_from_u64(5))?;
        let sq = t.square(z);
        Ok(t.sum(sq))
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn backward_examples() {
    let mut p = params(&[("w", Tensor::new(vec![1], vec![3.0]).unwrap())]);
    let mut tape = Tape::new();
    let w = tape.param(&p, "w").unwrap();
    let sq = tape.square(w);
    let loss = tape.sum(sq);
    tape.backward(loss, &mut p).unwrap();
    assert_eq!(p.get("w").unwrap().grad().unwrap(), &[6.0]);
    tape.backward(loss, &mut p).unwrap();
    assert_eq!(p.get("w").unwrap().grad().unwrap(), &[12.0], "repeated calls accumulate");

    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut p = params(&[("W", rand_tensor(&[3, 2], &mut rng)), ("b", rand_tensor(&[3], &mut rng))]);
    let mut tape = Tape::new();
    let x = tape.constant(&rand_tensor(&[1, 2], &mut rng));
    let (w, b) = (tape.param(&p, "W").unwrap(), tape.param(&p, "b").unwrap());
    let y = tape.linear(x, w, Some(b)).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss, &mut p).unwrap();
    assert_eq!(p.get("b").unwrap().grad().unwrap(), &[1.0, 1.0, 1.0]);

    assert!(matches!(tape.backward(y, &mut p), Err(Error::Contract(_))));
}

#[test]
fn gradcheck_quadratic_and_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let p = params(&[("w", rand_tensor(&[5], &mut rng))]);
    let opts = GradCheckOptions::default();
    let r = finite_difference_check(
        |p, t| {
            let w = t.param(p, "w")?;
            let sq = t.square(w);
            Ok(t.sum(sq))
        },
        &p,
        opts,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");

    let p = params(&[("W", rand_tensor(&[4, 3], &mut rng)), ("b", rand_tensor(&[4], &mut rng))]);
    let x = rand_tensor(&[2, 3], &mut rng);
    let r = finite_difference_check(
        |p, t| {
            let xv = t.constant(&x);
            let (w, b) = (t.param(p, "W")?, t.param(p, "b")?);
            let y = t.linear(xv, w, Some(b))?;
            let s = t.softplus(y);
            Ok(t.sum(s))
        },
        &p,
        opts,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn gradcheck_flags_missing_gradient_path() {
    let p = params(&[("w", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap()), ("ok", Tensor::ones(&[1]))]);
    let r = finite_difference_check(
        |p, t| {
            // `w` enters as a constant, so the tape never differentiates it.
            let dead = t.constant(p.get("w")?);
            let ok = t.param(p, "ok")?;
            let sq = t.square(dead);
            let a = t.sum(sq);
            let b = t.sum(ok);
            t.add(a, b)
        },
        &p,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_error >= 1e-2);
    assert_eq!(r.flagged, vec!["w".to_string()]);
}

#[test]
fn gradcheck_rejects_nondeterministic_loss() {
    let p = params(&[("w", Tensor::ones(&[2]))]);
    let mut calls = 0u64;
    let r = finite_difference_check(
        |p, t| {
            calls += 1;
            let w = t.param(p, "w")?;
            let z = t.reparameterize(w, w, &mut ChaCha8Rng::seed_from_u64(calls))?;
            Ok(t.sum(z))
        },
        &p,
        GradCheckOptions::default(),
    );
    assert!(matches!(r, Err(Error::Contract(_))));
    assert!(finite_difference_check(|p, t| Ok(t.param(p, "w").map(|w| t.sum(w))?), &p, GradCheckOptions { step: 0.0, ..Default::default() }).is_err());
}
