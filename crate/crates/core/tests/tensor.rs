use emogen_core::autograd::Tape;
use emogen_core::optim::{clip_grad_norm, global_norm, Adam, AdamConfig};
use emogen_core::seeded_rng;
use emogen_core::tensor::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-30.0f64..30.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..6, 1usize..40).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v);
        let out = tape.value(s);
        for r in 0..out.rows() {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_moments(x in (1usize..6, 2usize..64).prop_flat_map(|(r, c)| matrix(r, c))) {
        let d = x.cols();
        // Rows need spread well above the epsilon for unit variance to hold.
        prop_assume!((0..x.rows()).all(|r| {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / d as f64;
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64 > 1e-2
        }));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::full(&[d], 1.0));
        let b = tape.constant(Tensor::zeros(&[d]));
        let y = tape.layer_norm(v, g, b).unwrap();
        let out = tape.value(y);
        for r in 0..out.rows() {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3, "var {}", var);
        }
    }

    #[test]
    fn clipping_bounds_norm_and_keeps_direction(
        data in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 1..20), 1..5),
        max_norm in 0.01f64..50.0,
    ) {
        let mut grads: Vec<Tensor<f64>> = data.iter().map(|d| Tensor::new(&[d.len()], d.clone()).unwrap()).collect();
        let before = grads.clone();
        let norm = clip_grad_norm(&mut grads, max_norm);
        prop_assert!((norm - global_norm(&before)).abs() < 1e-9);
        prop_assert!(global_norm(&grads) <= max_norm * (1.0 + 1e-9));
        let s = if norm > max_norm { max_norm / norm } else { 1.0 };
        for (g, b) in grads.iter().zip(&before) {
            for (x, y) in g.data().iter().zip(b.data()) {
                prop_assert!((x - y * s).abs() <= 1e-9 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn concat_then_split_routes_exactly(
        a in matrix(3, 4), b in matrix(3, 2), c in matrix(3, 5), axis in 0usize..2,
    ) {
        let (a, b, c) = if axis == 0 {
            let t = |m: Tensor<f64>| { let (r, c) = (m.rows(), m.cols()); let d = emogen_core::tensor::transpose2(m.data(), r, c); Tensor::new(&[c, r], d).unwrap() };
            (t(a), t(b), t(c))
        } else {
            (a, b, c)
        };
        let sizes: Vec<usize> = [&a, &b, &c].iter().map(|m| m.shape()[axis]).collect();
        let mut tape = Tape::new();
        let va = tape.param(a.clone());
        let vb = tape.param(b.clone());
        let vc = tape.param(c.clone());
        let joined = tape.concat(&[va, vb, vc], axis).unwrap();
        let parts = tape.split(joined, axis, &sizes).unwrap();
        for (p, orig) in parts.iter().zip([&a, &b, &c]) {
            prop_assert_eq!(tape.value(*p).data(), orig.data());
        }
        // Weight each part differently and check that gradients land on their source.
        let target: Vec<f64> = vec![0.0; b.numel()];
        let loss = tape.mse(parts[1], &target).unwrap();
        let grads = tape.backward(loss).unwrap();
        let n = b.numel() as f64;
        prop_assert!(grads.get(va).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
        prop_assert!(grads.get(vc).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
        let gb = grads.get(vb).unwrap();
        for (g, x) in gb.data().iter().zip(b.data()) {
            prop_assert!((g - 2.0 * x / n).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn ignored_rows_get_exactly_zero_gradient(
        logits in matrix(6, 9),
        targets in prop::collection::vec(prop::option::of(0usize..9), 6),
    ) {
        const IGNORE: usize = usize::MAX;
        let t: Vec<usize> = targets.iter().map(|o| o.unwrap_or(IGNORE)).collect();
        let mut tape = Tape::new();
        let x = tape.param(logits);
        let loss = tape.cross_entropy(x, &t, IGNORE).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        for (r, target) in targets.iter().enumerate() {
            let row = g.row(r);
            match target {
                None => prop_assert!(row.iter().all(|&v| v == 0.0)),
                Some(_) => prop_assert!(row.iter().sum::<f64>().abs() < 1e-9),
            }
        }
    }
}

#[test]
fn cross_entropy_matches_closed_form() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let loss = tape.cross_entropy(x, &[2], usize::MAX).unwrap();
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    assert!((tape.value(loss).item() - (z.ln() - 3.0)).abs() < 1e-12);
    let g = tape.backward(loss).unwrap();
    let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z - 1.0];
    for (a, b) in g.get(x).unwrap().data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn adam_is_deterministic_and_matches_first_step() {
    let run = || {
        let mut rng = seeded_rng(11);
        let mut params = vec![Tensor::<f32>::randn(&[4, 4], 1.0, &mut rng), Tensor::randn(&[7], 1.0, &mut rng)];
        let mut adam = Adam::new(AdamConfig::default());
        for step in 0..20 {
            let grads: Vec<Tensor<f32>> =
                params.iter().map(|p| Tensor::from_fn(p.shape(), |i| p.data()[i] * 0.5 + (step as f32 + i as f32).sin())).collect();
            adam.step(&mut params, &grads, 1e-2).unwrap();
        }
        params
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    // The bias-corrected first step moves every coordinate by lr * sign(g).
    let mut p = vec![Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
    let g = vec![Tensor::<f64>::new(&[3], vec![0.3, -4.0, 1e-3]).unwrap()];
    Adam::new(AdamConfig::default()).step(&mut p, &g, 0.1).unwrap();
    for (x, (p0, s)) in p[0].data().iter().zip([(1.0, 1.0), (-2.0, -1.0), (0.5, 1.0)]) {
        let eps_effect = 1e-8 / 1e-3;
        assert!((x - (p0 - 0.1 * s)).abs() <= 0.1 * eps_effect + 1e-12, "{x}");
    }
}

#[test]
fn adam_rejects_non_finite_without_mutation() {
    let mut p = vec![Tensor::<f32>::full(&[2], 1.0)];
    let g = vec![Tensor::<f32>::new(&[2], vec![f32::NAN, 0.0]).unwrap()];
    let mut adam = Adam::new(AdamConfig::default());
    assert!(adam.step(&mut p, &g, 0.1).is_err());
    assert_eq!(p[0].data(), [1.0, 1.0]);
    assert_eq!(adam.steps(), 0);
}
