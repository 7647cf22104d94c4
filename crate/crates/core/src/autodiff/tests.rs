use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Runs `build` on leaves made from `inputs`, reduces its output with fixed
/// random weights, and checks every input's gradient by central differences.
fn check_inputs<F>(inputs: &[Tensor<f64>], build: F, tol: f64) -> GradcheckReport
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |flat: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let mut ids = Vec::new();
        let mut off = 0;
        for t in inputs {
            let part = flat[off..off + t.len()].to_vec();
            off += t.len();
            ids.push(tape.leaf(Tensor::new(t.shape().to_vec(), part).unwrap(), true));
        }
        let out = build(&mut tape, &ids);
        let n = tape.value(out).len();
        let mut wrng = ChaCha8Rng::seed_from_u64(7);
        let weights: Vec<f64> = (0..n).map(|_| wrng.random_range(-1.0..1.0)).collect();
        let loss = tape.weighted_sum(out, weights).unwrap();
        let value = tape.value(loss).data()[0];
        if !want_grad {
            return (value, Vec::new());
        }
        let grads = tape.backward(loss).unwrap();
        let mut g = Vec::new();
        for (&id, t) in ids.iter().zip(inputs) {
            match grads.get(id) {
                Some(v) => g.extend_from_slice(v.data()),
                None => g.extend(std::iter::repeat(0.0).take(t.len())),
            }
        }
        (value, g)
    };
    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let (_, analytic) = eval(&theta, true);
    let _ = rng.random::<u8>();
    gradcheck(
        |p| eval(p, false).0,
        &theta,
        &analytic,
        GradcheckOptions {
            tolerance: tol,
            ..Default::default()
        },
    )
}

#[test]
fn linear_identity_and_zero_input() {
    let mut tape = Tape::<f64>::new();
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -4.0]).unwrap();
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let xi = tape.constant(x.clone());
    let wi = tape.constant(eye);
    let bi = tape.constant(Tensor::zeros(&[3]));
    let y = tape.linear(xi, wi, bi).unwrap();
    assert_eq!(tape.value(y), &x);

    let zero = tape.constant(Tensor::zeros(&[4, 3]));
    let w = tape.constant(Tensor::full(&[3, 2], 5.0));
    let b = tape.constant(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
    let y = tape.linear(zero, w, b).unwrap();
    for r in 0..4 {
        assert_eq!(tape.value(y).row(r), &[0.5, -1.5]);
    }
}

#[test]
fn linear_rejects_shape_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let w = tape.constant(Tensor::zeros(&[4, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.linear(x, w, b), Err(Error::InvalidArgument(_))));
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&mut rng, &[5, 4]), random(&mut rng, &[4, 3]), random(&mut rng, &[3])];
    let report = check_inputs(&inputs, |t, ids| t.linear(ids[0], ids[1], ids[2]).unwrap(), 1e-6);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn relu_and_softplus_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
    let s = tape.softplus(x);
    assert!((tape.value(s).data()[2] - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(softplus(1000.0f64).is_finite() && (softplus(1000.0f64) - 1000.0).abs() < 1e-9);
    assert!(softplus(-1000.0f64) >= 0.0);
}

#[test]
fn softplus_gradient_is_logistic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[4, 5]).map(|v| 4.0 * v);
    let report = check_inputs(&[x], |t, ids| t.softplus(ids[0]), 1e-6);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn relu_gradient_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[6, 4]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let report = check_inputs(&[x], |t, ids| t.relu(ids[0]), 1e-6);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn batchnorm_eval_uses_running_statistics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![2, 1], vec![3.0, -1.0]).unwrap());
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let (y, stats) = tape.batchnorm(x, g, b, BnMode::Eval, &[1.0], &[4.0], 1e-5).unwrap();
    assert!(stats.is_none());
    let s = (4.0f64 + 1e-5).sqrt();
    assert!((tape.value(y).data()[0] - 2.0 / s).abs() < 1e-12);
    assert!((tape.value(y).data()[1] + 2.0 / s).abs() < 1e-12);
}

#[test]
fn batchnorm_train_output_has_beta_mean_and_gamma_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows = 64;
    let x = random(&mut rng, &[rows, 3]).map(|v| 3.0 * v + 1.5);
    let gamma = Tensor::new(vec![3], vec![0.5, 2.0, -1.5]).unwrap();
    let beta = Tensor::new(vec![3], vec![0.1, -0.7, 3.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let (xi, gi, bi) = (tape.constant(x), tape.constant(gamma.clone()), tape.constant(beta.clone()));
    let (y, stats) = tape
        .batchnorm(xi, gi, bi, BnMode::Train, &[0.0; 3], &[1.0; 3], 1e-5)
        .unwrap();
    assert!(stats.is_some());
    let yv = tape.value(y);
    for ch in 0..3 {
        let col: Vec<f64> = (0..rows).map(|r| yv.row(r)[ch]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        assert!((mean - beta.data()[ch]).abs() < 1e-5);
        let g2 = gamma.data()[ch].powi(2);
        assert!((var - g2).abs() / g2 < 0.02);
    }
}

#[test]
fn batchnorm_statistics_report_unbiased_variance() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let (_, stats) = tape.batchnorm(x, g, b, BnMode::AdaptStats, &[0.0], &[1.0], 1e-5).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![3.0]);
    assert!((stats.var[0] - 14.0 / 3.0).abs() < 1e-12);
}

#[test]
fn batchnorm_needs_two_rows_for_batch_statistics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    for mode in [BnMode::Train, BnMode::AdaptStats] {
        assert!(matches!(
            tape.batchnorm(x, g, b, mode, &[0.0; 2], &[1.0; 2], 1e-5),
            Err(Error::InvalidArgument(_))
        ));
    }
    assert!(tape.batchnorm(x, g, b, BnMode::Eval, &[0.0; 2], &[1.0; 2], 1e-5).is_ok());
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for mode in [BnMode::Train, BnMode::Eval] {
        let inputs = [
            random(&mut rng, &[8, 3]).map(|v| 2.0 * v + 0.3),
            random(&mut rng, &[3]),
            random(&mut rng, &[3]),
        ];
        let report = check_inputs(
            &inputs,
            |t, ids| {
                t.batchnorm(ids[0], ids[1], ids[2], mode, &[0.2, -0.1, 0.4], &[1.3, 0.7, 2.0], 1e-5)
                    .unwrap()
                    .0
            },
            1e-6,
        );
        assert!(report.passed(), "{mode:?}: {report:?}");
    }
}

#[test]
fn backward_through_statistics_only_batchnorm_is_a_contract_violation() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![3, 1], vec![1.0, 2.0, 4.0]).unwrap(), true);
    let g = tape.leaf(Tensor::full(&[1], 1.0), true);
    let b = tape.leaf(Tensor::zeros(&[1]), true);
    let (y, _) = tape.batchnorm(x, g, b, BnMode::AdaptStats, &[0.0], &[1.0], 1e-5).unwrap();
    // The pass is recorded as gradient-free, so nothing downstream requires grad.
    let w = tape.leaf(Tensor::full(&[1, 1], 2.0), true);
    let bias = tape.leaf(Tensor::zeros(&[1]), true);
    let z = tape.linear(y, w, bias).unwrap();
    let loss = tape.weighted_sum(z, vec![1.0; 3]).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(x).is_none() && grads.get(g).is_none());
    assert!(grads.get(w).is_some());

    // Forcing a gradient into the node itself is rejected.
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(), true);
    let g = tape.leaf(Tensor::full(&[1], 1.0), true);
    let b = tape.leaf(Tensor::zeros(&[1]), true);
    let (y, _) = tape.batchnorm(x, g, b, BnMode::AdaptStats, &[0.0], &[1.0], 1e-5).unwrap();
    let loss = tape
        .custom_scalar(0.0, vec![(y, Tensor::full(&[2, 1], 1.0)), (x, Tensor::full(&[2, 1], 1.0))])
        .unwrap();
    let mut forced = tape;
    forced.force_requires_grad(y);
    assert!(matches!(forced.backward(loss), Err(Error::ContractViolation(_))));
}

#[test]
fn maxpool_single_token_is_identity() {
    let mut tape = Tape::<f64>::new();
    let x = Tensor::new(vec![1, 3], vec![0.5, -2.0, 7.0]).unwrap();
    let xi = tape.constant(x.clone());
    let y = tape.max_pool(xi, 1).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn maxpool_routes_gradient_to_the_maximum() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 9.0, 5.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let y = tape.max_pool(x, 3).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 9.0]);
    let loss = tape.weighted_sum(y, vec![1.0, 1.0]).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_ties_go_to_lowest_index() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 3.0]).unwrap(), true);
    let y = tape.max_pool(x, 2).unwrap();
    let loss = tape.weighted_sum(y, vec![1.0]).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn maxpool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Distinct values at least 1e-2 apart keep the argmax stable under h = 1e-4.
    let mut vals: Vec<f64> = (0..24).map(|i| i as f64 * 0.05).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::new(vec![8, 3], vals).unwrap();
    let report = check_inputs(&[x], |t, ids| t.max_pool(ids[0], 4).unwrap(), 1e-6);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn cross_entropy_values() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[1, 4]));
    let l = tape.cross_entropy(z, &[2]).unwrap();
    assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

    let z = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 60.0, 0.0]).unwrap());
    let l = tape.cross_entropy(z, &[1]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-20);

    let z = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(tape.cross_entropy(z, &[3]), Err(Error::InvalidArgument(_))));
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&mut rng, &[3, 5]).map(|v| 3.0 * v);
    let report = check_inputs(&[logits], |t, ids| t.cross_entropy(ids[0], &[4, 0, 2]).unwrap(), 1e-6);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn concat_broadcast_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = [random(&mut rng, &[6, 2]), random(&mut rng, &[2, 3])];
    let report = check_inputs(&inputs, |t, ids| t.concat_broadcast(ids[0], ids[1], 3).unwrap(), 1e-6);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn fan_out_accumulates_additively() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.5, -0.5]).unwrap(), true);
    let once = tape.weighted_sum(x, vec![3.0, 4.0]).unwrap();
    let g1 = tape.backward(once).unwrap().take(x).unwrap();
    let doubled = tape.add(x, x).unwrap();
    let twice = tape.weighted_sum(doubled, vec![3.0, 4.0]).unwrap();
    let g2 = tape.backward(twice).unwrap().take(x).unwrap();
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn small_composition_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = [
        random(&mut rng, &[8, 3]),
        random(&mut rng, &[3, 4]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4]).map(|v| v + 1.5),
        random(&mut rng, &[4]),
    ];
    let report = check_inputs(
        &inputs,
        |t, ids| {
            let h = t.linear(ids[0], ids[1], ids[2]).unwrap();
            let (n, _) = t
                .batchnorm(h, ids[3], ids[4], BnMode::Train, &[0.0; 4], &[1.0; 4], 1e-5)
                .unwrap();
            let s = t.softplus(n);
            t.max_pool(s, 4).unwrap()
        },
        1e-6,
    );
    assert!(report.passed(), "{report:?}");
}
