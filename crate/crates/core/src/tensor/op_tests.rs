use std::rc::Rc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

const STEP: f64 = 1e-6;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Weighted sum so that every output element has a distinct cotangent.
fn probe_sum(g: &Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64 - 0.011 * (i * i) as f64).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn assert_grad<Fun>(inputs: &[Tensor<f64>], tol: f64, f: Fun)
where
    Fun: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = check_gradients(inputs, STEP, f).unwrap();
    assert!(report.passes(tol), "{report:?}");
}

#[test]
fn matmul_identity_and_hand_product() {
    let g = Graph::<f64>::new();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let c = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(g.value(g.matmul(r, col).unwrap()).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, TensorError::ShapeMismatch { .. }));
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [rand_t(&[3, 4], &mut rng), rand_t(&[4, 2], &mut rng)];
    assert_grad(&inputs, 1e-5, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        g.sum(c)
    });
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    assert_eq!(g.value(g.softmax(x, 0).unwrap()).data(), &[0.5, 0.5]);
    let big = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.value(g.softmax(big, 0).unwrap());
    assert_eq!(y.data()[0], 1.0);
    assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
}

#[test]
fn softmax_gradient_on_random_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert_grad(&[rand_t(&[5], &mut rng)], 1e-5, |g, v| {
        let y = g.softmax(v[0], 0)?;
        probe_sum(g, y)
    });
}

#[test]
fn softmax_along_leading_axis_normalizes_columns() {
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0]));
    let y = g.value(g.softmax(x, 0).unwrap());
    for c in 0..3 {
        assert!((y.at(0, c) + y.at(1, c) - 1.0).abs() < 1e-15);
    }
    assert!((y.at(0, 1) - 0.5).abs() < 1e-15);
}

#[test]
fn l2_normalize_three_four_five() {
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[3.0, 4.0]));
    let y = g.value(g.l2_normalize(x).unwrap());
    assert!((y.data()[0] - 0.6).abs() < 1e-15);
    assert!((y.data()[1] - 0.8).abs() < 1e-15);
    let z = g.constant(Tensor::zeros([2]));
    assert!(g.l2_normalize(z).is_err());
}

#[test]
fn layer_norm_of_constant_row_is_zero_before_affine() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([1, 4], 7.5));
    let gamma = g.constant(Tensor::full([4], 1.0));
    let beta = g.constant(Tensor::zeros([4]));
    let y = g.value(g.layer_norm(x, gamma, beta).unwrap());
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert!(y.is_finite());
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_grad(&[rand_t(&[3, 5], &mut rng)], 1e-4, |g, v| {
        let y = g.gelu(v[0])?;
        probe_sum(g, y)
    });
}

#[test]
fn backward_square_and_product() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);

    let g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = g.param(Tensor::scalar(5.0));
    let p = g.mul(x, y).unwrap();
    let grads = g.backward(p).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 5.0);
    assert_eq!(grads.get(y).unwrap().item(), 2.0);
}

#[test]
fn backward_errors() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros([2]));
    assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::AlreadyBackpropagated)));

    let other = Graph::<f64>::new();
    let y = other.param(Tensor::scalar(1.0));
    assert!(matches!(g.backward(y), Err(TensorError::Detached)));
    assert!(matches!(g.add(x, y), Err(TensorError::Detached)));
}

#[test]
fn unreached_leaves_receive_zero_gradients_and_constants_none() {
    let g = Graph::<f64>::new();
    let used = g.param(Tensor::scalar(1.0));
    let unused = g.param(Tensor::full([3], 1.0));
    let c = g.constant(Tensor::scalar(2.0));
    let p = g.mul(used, c).unwrap();
    let grads = g.backward(p).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    assert!(grads.get(c).is_none());
}

#[test]
fn finite_checks_reject_overflow() {
    let g = Graph::<f64>::new().with_finite_checks(true);
    let x = g.constant(Tensor::scalar(1e300));
    assert!(matches!(g.mul(x, x), Err(TensorError::NonFinite { .. })));
    let lax = Graph::<f64>::new();
    let x = lax.constant(Tensor::scalar(1e300));
    assert!(lax.mul(x, x).is_ok());
}

#[test]
fn every_op_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let a = rand_t(&[3, 4], &mut rng);
        let b = rand_t(&[3, 4], &mut rng);
        let row = rand_t(&[4], &mut rng);
        let sq = rand_t(&[4, 4], &mut rng);
        let lin = 1e-5;
        let inputs = [a.clone(), b.clone()];
        assert_grad(&inputs, lin, |g, v| {
            let y = g.add(v[0], v[1])?;
            probe_sum(g, y)
        });
        assert_grad(&inputs, lin, |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe_sum(g, y)
        });
        assert_grad(&inputs, lin, |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe_sum(g, y)
        });
        assert_grad(&[a.clone(), row.clone()], lin, |g, v| {
            let y = g.add_row(v[0], v[1])?;
            probe_sum(g, y)
        });
        assert_grad(&[a.clone()], lin, |g, v| {
            let y = g.scale(v[0], -1.7)?;
            probe_sum(g, y)
        });
        assert_grad(&[a.clone(), sq.clone()], lin, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe_sum(g, y)
        });
        assert_grad(&[a.clone()], lin, |g, v| {
            let y = g.transpose(v[0])?;
            probe_sum(g, y)
        });
        for axis in 0..2 {
            assert_grad(&inputs, lin, |g, v| {
                let y = g.concat(&[v[0], v[1], v[0]], axis)?;
                probe_sum(g, y)
            });
            assert_grad(&[a.clone()], lin, |g, v| {
                let y = g.slice(v[0], axis, 1, 2)?;
                probe_sum(g, y)
            });
            assert_grad(&[a.clone()], lin, |g, v| {
                let y = g.mean_axis(v[0], axis)?;
                probe_sum(g, y)
            });
        }
        assert_grad(&[a.clone()], lin, |g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 1])?;
            probe_sum(g, y)
        });
        assert_grad(&[a.clone()], lin, |g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            probe_sum(g, y)
        });
        assert_grad(&[a.clone()], lin, |g, v| g.mean(v[0]));
        assert_grad(&[a.clone()], lin, |g, v| {
            let y = g.segment_mean(v[0], &[(0, 1), (1, 2), (0, 3)])?;
            probe_sum(g, y)
        });
        let gamma = rand_t(&[4], &mut rng);
        assert_grad(&[a.clone(), gamma, row.clone()], 1e-4, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            probe_sum(g, y)
        });
        assert_grad(&[a.clone()], 1e-4, |g, v| {
            let y = g.l2_normalize(v[0])?;
            probe_sum(g, y)
        });
        assert_grad(&[a.clone()], 1e-4, |g, v| {
            let y = g.row_norm(v[0])?;
            probe_sum(g, y)
        });
        assert_grad(&[a.clone()], 1e-4, |g, v| {
            let y = g.relu(v[0])?;
            probe_sum(g, y)
        });
        for axis in 0..2 {
            assert_grad(&[a.clone()], 1e-4, |g, v| {
                let y = g.softmax(v[0], axis)?;
                probe_sum(g, y)
            });
        }
        assert_grad(&[a.clone()], 1e-4, |g, v| g.cross_entropy(v[0], &[3, 0, 1]));
    }
}

fn composed_attention(
    g: &Graph<f64>,
    q: Var,
    k: Var,
    v: Var,
    layout: &AttentionLayout,
) -> Result<Var> {
    let d = g.shape(q)[1];
    let dh = d / layout.heads();
    let mut rows = Vec::new();
    for s in layout.segments() {
        let mut heads = Vec::new();
        for h in 0..layout.heads() {
            let qs = g.slice(g.slice(q, 0, s.q_start, s.q_len)?, 1, h * dh, dh)?;
            let ks = g.slice(g.slice(k, 0, s.k_start, s.k_len)?, 1, h * dh, dh)?;
            let vs = g.slice(g.slice(v, 0, s.k_start, s.k_len)?, 1, h * dh, dh)?;
            let scores = g.scale(g.matmul(qs, g.transpose(ks)?)?, 1.0 / (dh as f64).sqrt())?;
            let p = g.softmax(scores, 1)?;
            heads.push(g.matmul(p, vs)?);
        }
        rows.push(g.concat(&heads, 1)?);
    }
    g.concat(&rows, 0)
}

fn test_layout() -> Rc<AttentionLayout> {
    Rc::new(AttentionLayout::new(
        vec![
            Segment { q_start: 0, q_len: 2, k_start: 0, k_len: 3 },
            Segment { q_start: 2, q_len: 1, k_start: 3, k_len: 2 },
            Segment { q_start: 3, q_len: 2, k_start: 1, k_len: 4 },
        ],
        2,
    ))
}

#[test]
fn fused_attention_matches_composed_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layout = test_layout();
    let (q, k, v) = (rand_t(&[5, 6], &mut rng), rand_t(&[5, 6], &mut rng), rand_t(&[5, 6], &mut rng));
    let g = Graph::<f64>::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let fused = g.value(g.attention(qv, kv, vv, &layout).unwrap());
    let composed = g.value(composed_attention(&g, qv, kv, vv, &layout).unwrap());
    assert!(fused.max_abs_diff(&composed) < 1e-12);
}

#[test]
fn fused_attention_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layout = test_layout();
    for _ in 0..20 {
        let inputs = [rand_t(&[5, 6], &mut rng), rand_t(&[5, 6], &mut rng), rand_t(&[5, 6], &mut rng)];
        assert_grad(&inputs, 1e-4, |g, v| {
            let y = g.attention(v[0], v[1], v[2], &layout)?;
            probe_sum(g, y)
        });
    }
}

#[test]
fn attention_rejects_bad_layouts() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([3, 6]));
    let bad_heads = Rc::new(AttentionLayout::blocks(3, &[(0, 3)], 4));
    assert!(g.attention(x, x, x, &bad_heads).is_err());
    let out_of_range = Rc::new(AttentionLayout::blocks(3, &[(1, 3)], 2));
    assert!(g.attention(x, x, x, &out_of_range).is_err());
}

#[test]
fn shared_input_gradients_accumulate() {
    let g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, -2.0]));
    let y = g.add(x, x).unwrap();
    let z = g.mul(y, x).unwrap();
    let s = g.sum(z).unwrap();
    // d/dx Σ 2x² = 4x
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0, -8.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(
        data in prop::collection::vec(-1e4f64..1e4, 12),
    ) {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 4], &data));
        let y = g.value(g.softmax(x, 1).unwrap());
        for row in y.rows() {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::<f64>::new();
        let a = g.constant(rand_t(&[m, k], &mut rng));
        let b = g.constant(rand_t(&[k, n], &mut rng));
        let c = g.constant(rand_t(&[n, p], &mut rng));
        let left = g.value(g.matmul(g.matmul(a, b).unwrap(), c).unwrap());
        let right = g.value(g.matmul(a, g.matmul(b, c).unwrap()).unwrap());
        let scale = left.data().iter().map(|x| x.abs()).fold(1.0, f64::max);
        prop_assert!(left.max_abs_diff(&right) / scale < 1e-8);
    }

    #[test]
    fn data_length_always_matches_shape(rows in 1usize..6, cols in 1usize..6) {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::full([rows, cols], 1.0));
        for v in [g.transpose(a).unwrap(), g.concat(&[a, a], 1).unwrap(), g.mean_axis(a, 0).unwrap()] {
            let val = g.value(v);
            prop_assert_eq!(val.numel(), val.shape().iter().product::<usize>());
        }
    }
}
