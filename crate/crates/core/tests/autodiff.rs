mod common;

use bwe_core::tensor::{check_gradients, Graph, Padding, ParamStore, ParamValues, Tensor, TensorError};
use common::ops::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_passes_finite_differences_over_twenty_seeds() {
    for op in ALL_OPS {
        let mut skipped = 0;
        for seed in 0..20u64 {
            let case = make_case(op, seed);
            let shadow = case.store.shadow::<f64>();
            let report =
                check_gradients(&shadow, &fd_config(seed), |p| build_case(op, &case, p, seed)).unwrap();
            assert!(
                report.mismatches.is_empty(),
                "{op:?} seed {seed}: {:?}",
                report.mismatches
            );
            assert!(report.checked > 0, "{op:?} seed {seed}");
            skipped += report.skipped_kinks;
        }
        assert!(skipped <= 5, "{op:?} skipped {skipped} kinked coordinates");
    }
}

#[test]
fn identity_kernel_passes_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[6, 3], 1.0);
    let mut eye = Tensor::zeros(&[1, 3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut g = Graph::<f32>::new();
    let xn = g.constant(x.clone());
    let wn = g.constant(eye.clone());
    let bn = g.constant(Tensor::zeros(&[3]));
    let y = g.conv1d(xn, wn, Some(bn), 1, Padding::Causal).unwrap();
    assert_eq!(g.value(y), &x);

    let t = g.conv_transpose1d(xn, wn, None, 1).unwrap();
    assert_eq!(g.value(t), &x);
}

#[test]
fn dilated_impulse_response_lands_on_taps() {
    let mut x = Tensor::zeros(&[20, 1]);
    x.data_mut()[3] = 1.0;
    let w = Tensor::from_vec(&[3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap();
    let mut g = Graph::<f32>::new();
    let (xn, wn) = (g.constant(x), g.constant(w));
    let y = g.conv1d(xn, wn, None, 4, Padding::Causal).unwrap();
    let nonzero: Vec<usize> = g
        .value(y)
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(t, _)| t - 3)
        .collect();
    assert_eq!(nonzero, vec![0, 4, 8]);
}

#[test]
fn zero_weights_leave_the_bias() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[5, 2], 3.0));
    let w = g.constant(Tensor::zeros(&[3, 2, 4]));
    let b = g.constant(Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 0.0]).unwrap());
    let y = g.conv1d(x, w, Some(b), 2, Padding::Causal).unwrap();
    for t in 0..5 {
        assert_eq!(g.value(y).row(t), &[1.0, -2.0, 0.5, 0.0]);
    }
}

#[test]
fn two_stride_two_transposes_give_four_times_the_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f32>::new();
    let x = g.constant(random_tensor(&mut rng, &[28, 4], 1.0));
    let w = g.constant(random_tensor(&mut rng, &[4, 4, 4], 0.5));
    let a = g.conv_transpose1d(x, w, None, 2).unwrap();
    let b = g.conv_transpose1d(a, w, None, 2).unwrap();
    assert_eq!(g.value(b).dims(), &[112, 4]);
}

#[test]
fn single_frame_transpose_emits_kernel_slices() {
    let x = Tensor::from_vec(&[1, 2], vec![1.5, -0.5]).unwrap();
    // W[k][i][o], k in 0..2, i in 0..2, o in 0..1
    let w = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut g = Graph::<f32>::new();
    let (xn, wn) = (g.constant(x), g.constant(w));
    let y = g.conv_transpose1d(xn, wn, None, 2).unwrap();
    assert_eq!(g.value(y).data(), &[1.5 * 1.0 - 0.5 * 2.0, 1.5 * 3.0 - 0.5 * 4.0]);
}

#[test]
fn gated_activation_values() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_vec(&[3], vec![0.0, 30.0, 1.0]).unwrap());
    let b = g.constant(Tensor::from_vec(&[3], vec![0.0, 30.0, 0.0]).unwrap());
    let y = g.gated(a, b).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 1.0).abs() < 1e-12);
    assert!((v[2] - 0.380797).abs() < 1e-6);
    assert!((v[2] - 1f64.tanh() * 0.5).abs() < 1e-15);
}

#[test]
fn sum_gradient_is_all_ones_and_accumulates() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::full(&[2, 3], 0.25)).unwrap();
    let mut g = Graph::<f32>::new();
    let pn = g.param(&store, p);
    let loss = g.sum(pn).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    assert!(store.get(p).grad.data().iter().all(|&v| v == 1.0));
    g.backward_into(loss, &mut store).unwrap();
    assert!(store.get(p).grad.data().iter().all(|&v| v == 2.0));
}

#[test]
fn pointwise_weight_gradient_is_the_input_column_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[7, 3], 1.0);
    let mut store = ParamStore::new();
    let w = store.add("w", random_tensor(&mut rng, &[1, 3, 2], 1.0)).unwrap();
    let mut g = Graph::<f32>::new();
    let xn = g.constant(x.clone());
    let wn = g.param(&store, w);
    let y = g.conv1d(xn, wn, None, 1, Padding::Causal).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    let gw = grads.param(w).unwrap();
    for i in 0..3 {
        let col: f64 = (0..7).map(|t| x.row(t)[i] as f64).sum();
        for j in 0..2 {
            assert!((gw.data()[i * 2 + j] as f64 - col).abs() < 1e-5);
        }
    }
}

#[test]
fn backward_needs_a_recorded_scalar() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::zeros(&[3])).unwrap();
    let mut g = Graph::<f32>::new();
    let pn = g.param(&store, p);
    assert_eq!(g.backward(pn).err(), Some(TensorError::NoForward));
    let t = g.tanh(pn).unwrap();
    assert!(matches!(g.backward(t), Err(TensorError::NotScalar(_))));
    let empty = Graph::<f32>::new();
    assert_eq!(empty.backward(t).err(), Some(TensorError::NoForward));
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[4, 3]));
    let w = g.constant(Tensor::zeros(&[2, 2, 5]));
    assert!(matches!(
        g.conv1d(x, w, None, 1, Padding::Causal),
        Err(TensorError::ShapeMismatch { .. })
    ));
    let y = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.add(x, y), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(g.gated(x, y), Err(TensorError::ShapeMismatch { .. })));
}

/// `adj(y)[t] = sum_k y[t*s + k] W_k^T`, written as plain loops.
fn transpose_adjoint(y: &[f64], w: &[f64], t_in: usize, taps: usize, cin: usize, cout: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; t_in * cin];
    for t in 0..t_in {
        for k in 0..taps {
            let r = t * s + k;
            if r >= t_in * s {
                continue;
            }
            for i in 0..cin {
                for o in 0..cout {
                    out[t * cin + i] += y[r * cout + o] * w[(k * cin + i) * cout + o];
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn causal_conv_ignores_the_future(
        len in 2usize..40, taps in 1usize..5, dilation in 1usize..6, seed in 0u64..1000, cut_frac in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[len, 3], 1.0);
        let w = random_tensor(&mut rng, &[taps, 3, 2], 1.0);
        let t0 = ((len as f64 * cut_frac) as usize).min(len - 1);
        let mut xz = x.clone();
        xz.data_mut()[t0 * 3..].fill(0.0);
        let mut g = Graph::<f32>::new();
        let (a, b, wn) = (g.constant(x), g.constant(xz), g.constant(w));
        let ya = g.conv1d(a, wn, None, dilation, Padding::Causal).unwrap();
        let yb = g.conv1d(b, wn, None, dilation, Padding::Causal).unwrap();
        prop_assert_eq!(&g.value(ya).data()[..t0 * 2], &g.value(yb).data()[..t0 * 2]);
    }

    #[test]
    fn transpose_conv_matches_its_adjoint(
        len in 1usize..12, taps in 1usize..6, stride in 1usize..4, seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout) = (3, 4);
        let x = random_tensor(&mut rng, &[len, cin], 1.0).cast::<f64>();
        let w = random_tensor(&mut rng, &[taps, cin, cout], 1.0).cast::<f64>();
        let y = random_tensor(&mut rng, &[len * stride, cout], 1.0).cast::<f64>();
        let mut g = Graph::<f64>::new();
        let (xn, wn) = (g.constant(x.clone()), g.constant(w.clone()));
        let up = g.conv_transpose1d(xn, wn, None, stride).unwrap();
        let lhs: f64 = g.value(up).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let adj = transpose_adjoint(y.data(), w.data(), len, taps, cin, cout, stride);
        let rhs: f64 = x.data().iter().zip(&adj).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()).max(1e-12));
    }
}

#[test]
fn shadow_values_match_the_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let id = store.add("w", random_tensor(&mut rng, &[4, 2], 1.0)).unwrap();
    let shadow = store.shadow::<f64>();
    for (a, b) in shadow.value(id).data().iter().zip(store.get(id).value.data()) {
        assert_eq!(*a, *b as f64);
    }
}
