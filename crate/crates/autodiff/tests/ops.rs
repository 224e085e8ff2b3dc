use factr_autodiff::{grad_check, grad_check_many, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn value_of(f: impl FnOnce(&mut Tape<f64>) -> Var) -> Tensor<f64> {
    let mut tape = Tape::new();
    let out = f(&mut tape);
    tape.value(out).clone()
}

/// Weighted sum with fixed pseudo-random weights turns any tensor output
/// into a scalar whose gradient exercises every element.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = t.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &shape);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

#[test]
fn matmul_hand_example() {
    let a = Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
    let b = Tensor::from_f64(&[2, 2], &[5., 6., 7., 8.]).unwrap();
    let c = value_of(|t| {
        let (a, b) = (t.constant(a), t.constant(b));
        t.matmul(a, b).unwrap()
    });
    assert_eq!(c.data(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_identity_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 2]);
    let c = value_of(|t| {
        let i = t.constant(Tensor::eye(2));
        let av = t.constant(a.clone());
        t.matmul(i, av).unwrap()
    });
    assert_eq!(c, a);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 2]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let rep = grad_check_many(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 11)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(rep.max() < 1e-4, "{rep:?}");
}

#[test]
fn batched_matmul_with_broadcast_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&mut rng, &[2, 3, 4, 5]);
    let b = rand_tensor(&mut rng, &[3, 5, 2]);
    let rep = grad_check_many(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 12)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(rep.max() < 1e-4, "{rep:?}");
}

#[test]
fn matmul_is_associative_on_4x4_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (a, b, c) = (
        rand_tensor(&mut rng, &[4, 4]),
        rand_tensor(&mut rng, &[4, 4]),
        rand_tensor(&mut rng, &[4, 4]),
    );
    let mut t = Tape::new();
    let (a, b, c) = (t.constant(a), t.constant(b), t.constant(c));
    let ab = t.matmul(a, b).unwrap();
    let left = t.matmul(ab, c).unwrap();
    let bc = t.matmul(b, c).unwrap();
    let right = t.matmul(a, bc).unwrap();
    assert!(t.value(left).max_abs_diff(t.value(right)) < 1e-10);
}

#[test]
fn softmax_examples() {
    let run = |xs: &[f64]| {
        value_of(|t| {
            let x = t.constant(Tensor::from_f64(&[xs.len()], xs).unwrap());
            t.softmax(x, 0).unwrap()
        })
    };
    assert_eq!(run(&[0.0, 0.0]).data(), &[0.5, 0.5]);
    let big = run(&[1000.0, 0.0]);
    assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1] < 1e-12);
    // exp(k)/sum exp evaluated directly
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    let y = run(&[1.0, 2.0, 3.0]);
    for (got, want) in y.data().iter().zip([0.0900, 0.2447, 0.6652]) {
        assert!((got - want).abs() < 1e-4);
    }
    for (got, ek) in y.data().iter().zip(&e) {
        assert!((got - ek / s).abs() < 1e-15);
    }
}

#[test]
fn softmax_gradient_on_middle_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 4, 3]);
    let err = grad_check(
        |t, x| {
            let y = t.softmax(x, 1)?;
            project(t, y, 5)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn softmax_cross_entropy_gradient() {
    // -sum(onehot * log softmax) written as log(sum exp) - x_target
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = rand_tensor(&mut rng, &[3, 5]);
    let onehot = Tensor::from_f64(
        &[3, 5],
        &[
            0., 1., 0., 0., 0., //
            0., 0., 0., 0., 1., //
            1., 0., 0., 0., 0.,
        ],
    )
    .unwrap();
    let err = grad_check(
        |t, x| {
            let p = t.softmax(x, 1)?;
            let y = t.constant(onehot.clone());
            // squared error against one-hot keeps us inside the op set
            let d = t.sub(p, y)?;
            let sq = t.mul(d, d)?;
            t.sum(sq)
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn layer_norm_examples() {
    let ln = |xs: &[f64], eps: f64| {
        value_of(|t| {
            let d = xs.len();
            let x = t.constant(Tensor::from_f64(&[1, d], xs).unwrap());
            let g = t.constant(Tensor::ones(&[d]));
            let b = t.constant(Tensor::zeros(&[d]));
            t.layer_norm(x, g, b, eps).unwrap()
        })
    };
    assert_eq!(ln(&[1.0, 1.0, 1.0], 1e-5).data(), &[0.0, 0.0, 0.0]);
    let y = ln(&[0.0, 2.0], 1e-12);
    assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 8]);
    let g = rand_tensor(&mut rng, &[8]);
    let b = rand_tensor(&mut rng, &[8]);
    let rep = grad_check_many(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 6)
        },
        &[x, g, b],
        1e-5,
    )
    .unwrap();
    assert!(rep.max() < 1e-4, "{rep:?}");
}

#[test]
fn gelu_and_sigmoid_values() {
    let eval = |f: fn(&mut Tape<f64>, Var) -> Var, v: f64| {
        value_of(|t| {
            let x = t.constant(Tensor::scalar(v));
            f(t, x)
        })
        .item()
    };
    let gelu = |t: &mut Tape<f64>, x| t.gelu(x).unwrap();
    let sig = |t: &mut Tape<f64>, x| t.sigmoid(x).unwrap();
    assert_eq!(eval(gelu, 0.0), 0.0);
    assert!((eval(gelu, 10.0) - 10.0).abs() < 1e-12);
    assert!((eval(gelu, 1.0) - 0.8413).abs() < 1e-3);
    assert_eq!(eval(sig, 0.0), 0.5);
    assert!((eval(sig, 2.0) - 0.8808).abs() < 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x: f64 = rng.random_range(-6.0..6.0);
        assert!((eval(sig, x) + eval(sig, -x) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let bias = rand_tensor(&mut rng, &[4]);
    let col = rand_tensor(&mut rng, &[3, 1]).map(|v| v + 2.0);
    let rep = grad_check_many(
        |t, v| {
            let a = t.gelu(v[0])?;
            let s = t.sigmoid(v[0])?;
            let y = t.add(a, v[1])?;
            let y = t.mul(y, s)?;
            let y = t.div(y, v[2])?;
            let y = t.sub(y, v[1])?;
            let y = t.scale(y, 0.7)?;
            let y = t.add_scalar(y, 0.1)?;
            project(t, y, 13)
        },
        &[x, bias, col],
        1e-5,
    )
    .unwrap();
    assert!(rep.max() < 1e-4, "{rep:?}");
}

#[test]
fn shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let y = rand_tensor(&mut rng, &[2, 3, 2]);
    let rep = grad_check_many(
        |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let p = t.reshape(p, &[4, 6])?;
            let p = t.transpose(p)?;
            let n = t.narrow(p, 1, 1, 2)?;
            let n = t.reshape(n, &[2, 3, 2])?;
            let c = t.concat(&[n, v[1]], 2)?;
            let m = t.mean(c)?;
            let s = project(t, c, 15)?;
            t.add(s, m)
        },
        &[x, y],
        1e-5,
    )
    .unwrap();
    assert!(rep.max() < 1e-4, "{rep:?}");
}

#[test]
fn embedding_and_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let table = rand_tensor(&mut rng, &[5, 3]);
    let w = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let idx = vec![0, 4, 4, 1, 2, 3, 0, 0, 1, 2, 2, 4];
    let rep = grad_check_many(
        |t, v| {
            let e = t.embedding(v[0], &idx, &[2, 6])?;
            let y = t.depthwise_conv1d(e, v[1], v[2], 2)?;
            project(t, y, 17)
        },
        &[table, w, b],
        1e-5,
    )
    .unwrap();
    assert!(rep.max() < 1e-4, "{rep:?}");
}

#[test]
fn embedding_rejects_out_of_range() {
    let mut t = Tape::<f64>::new();
    let table = t.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(
        t.embedding(table, &[0, 3], &[2]),
        Err(TensorError::IndexOutOfRange { index: 3, .. })
    ));
}

#[test]
fn mse_gradient_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let p = rand_tensor(&mut rng, &[2, 3]);
    let q = rand_tensor(&mut rng, &[2, 3]);
    let rep = grad_check_many(|t, v| t.mse(v[0], v[1]), &[p, q], 1e-5).unwrap();
    assert!(rep.max() < 1e-8, "{rep:?}");
}

#[test]
fn backward_basic_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let y = t.mul(x, x).unwrap();
    assert_eq!(t.backward(y).unwrap().get(x).unwrap().item(), 6.0);

    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::zeros(&[2, 3]), true);
    let s = t.sum(x).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &Tensor::ones(&[2, 3]));

    // y = x + x accumulates exactly 2
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap(), true);
    let y = t.add(x, x).unwrap();
    let s = t.sum(y).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn backward_contract_cases() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::zeros(&[2]), true);
    let y = t.scale(x, 2.0).unwrap();
    assert!(matches!(t.backward(y), Err(TensorError::NonScalarLoss(_))));

    // detached: loss does not depend on x
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::ones(&[2]), true);
    let c = t.constant(Tensor::ones(&[2]));
    let s = t.sum(c).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::zeros(&[2]));
}

#[test]
fn non_finite_is_an_error() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::scalar(1.0));
    let z = t.constant(Tensor::scalar(0.0));
    assert!(matches!(t.div(a, z), Err(TensorError::NonFinite { op: "div", .. })));
}

#[test]
fn dropout_is_inverted_and_deterministic() {
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        value_of(|t| {
            let x = t.constant(Tensor::ones(&[1000]));
            t.dropout(x, 0.1, &mut rng).unwrap()
        })
    };
    let a = run(3);
    assert_eq!(a, run(3));
    let keep = 1.0 / 0.9;
    assert!(a.data().iter().all(|&v| v == 0.0 || (v - keep).abs() < 1e-12));
    let mean = a.sum() / 1000.0;
    assert!((mean - 1.0).abs() < 0.1);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_tensor(&mut rng, &[8, 16]);
        let b = rand_tensor(&mut rng, &[16, 8]);
        value_of(|t| {
            let (a, b) = (t.constant(a), t.constant(b));
            let y = t.matmul(a, b).unwrap();
            let y = t.gelu(y).unwrap();
            t.softmax(y, 1).unwrap()
        })
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[rows, cols]).map(|v| v * 20.0);
        let y = value_of(|t| { let x = t.constant(x); t.softmax(x, 1).unwrap() });
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn random_shape_ops_match_finite_differences(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let g = rand_tensor(&mut rng, &[n]);
        let be = rand_tensor(&mut rng, &[n]);
        let rep = grad_check_many(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.layer_norm(y, v[2], v[3], 1e-3)?;
            let y = t.gelu(y)?;
            let y = t.softmax(y, 1)?;
            project(t, y, seed)
        }, &[a, b, g, be], 1e-5).unwrap();
        prop_assert!(rep.max() < 1e-4, "{:?}", rep);
    }
}
