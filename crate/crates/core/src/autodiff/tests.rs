use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut g = Graph::default();
    let x = g.constant(&Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero_before_affine() {
    let mut g = Graph::default();
    let x = g.constant(&Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
    let gain = g.constant(&Tensor::vector(vec![1.0; 4]));
    let bias = g.constant(&Tensor::vector(vec![0.0; 4]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn activation_definitional_points() {
    assert_eq!(Activation::Gelu.apply(0.0), 0.0);
    assert_eq!(Activation::Relu.apply(-1.0), 0.0);
    assert!((Activation::LeakyRelu.apply(-1.0) + 0.01).abs() < 1e-15);
}

#[test]
fn quadratic_gradient() {
    let mut g = Graph::default();
    let w = g.param(&Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
}

#[test]
fn detached_parameter_gets_no_gradient() {
    let mut g = Graph::default();
    let w = g.param(&Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(&Tensor::vector(vec![3.0, 4.0]));
    let loss = g.sum(c).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(w).map_or(true, |gr| gr.iter().all(|&v| v == 0.0)));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut g = Graph::default();
    let logits = g.param(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let loss = g.cross_entropy(logits, &[0]).unwrap();
    g.backward(loss).unwrap();
    let gr = g.grad(logits).unwrap();
    assert!((gr[0] + 0.5).abs() < 1e-15 && (gr[1] - 0.5).abs() < 1e-15);
    let err = finite_diff_check(
        |g, x| g.cross_entropy(x, &[0]),
        &Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::default();
    let w = g.param(&Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(w), Err(AutodiffError::Contract(_))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::default();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn non_finite_output_names_the_op() {
    let mut g = Graph::default();
    let a = g.constant(&Tensor::vector(vec![f64::MAX]));
    let err = g.scale(a, 10.0).unwrap_err();
    assert_eq!(err, AutodiffError::NonFinite { op: "scale" });
}

#[test]
fn sum_of_squares_fd_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let err = finite_diff_check(
        |g, x| {
            let s = g.mul(x, x)?;
            g.sum(s)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn eval_dropout_is_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[4, 5]);
    let mut g = Graph::new(Mode::Eval);
    let v = g.constant(&x);
    let y = g.dropout(v, 0.5, 17).unwrap();
    assert_eq!(y, v);
    let a: Vec<u64> = g.value(y).data().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

#[test]
fn train_dropout_is_replayable_and_scaled() {
    let x = Tensor::full(&[50, 20], 1.0);
    let run = || {
        let mut g = Graph::new(Mode::Train { seed: 9, step: 4 });
        let v = g.constant(&x);
        let y = g.dropout(v, 0.3, 2).unwrap();
        g.value(y).data().to_vec()
    };
    let a = run();
    assert_eq!(a, run());
    let kept = a.iter().filter(|&&v| v != 0.0).count() as f64 / a.len() as f64;
    assert!((kept - 0.7).abs() < 0.05, "{kept}");
    assert!(a.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
}

#[test]
fn straight_through_forward_is_one_hot_with_lowest_index_ties() {
    let mut g = Graph::default();
    let x = g.constant(&Tensor::vector(vec![0.5, 0.5, 0.1]));
    let y = g.straight_through(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let mut x = rand_tensor(&mut rng, &[3, 7]);
        x.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        let mut g = Graph::default();
        let v = g.constant(&x);
        let y = g.softmax(v).unwrap();
        for row in g.value(y).data().chunks(7) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let grad_of = |a: f64, b: f64| {
        let mut g = Graph::default();
        let xv = g.param(&x);
        let wv = g.constant(&w);
        let h = g.matmul(xv, wv).unwrap();
        let t = g.tanh(h).unwrap();
        let f = g.sum(t).unwrap();
        let sq = g.mul(xv, xv).unwrap();
        let gg = g.mean(sq).unwrap();
        let fa = g.scale(f, a).unwrap();
        let gb = g.scale(gg, b).unwrap();
        let loss = g.add(fa, gb).unwrap();
        g.backward(loss).unwrap();
        g.grad(xv).unwrap().to_vec()
    };
    let (gf, gg) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
    let combo = grad_of(2.5, -0.75);
    for i in 0..combo.len() {
        assert!((combo[i] - (2.5 * gf[i] - 0.75 * gg[i])).abs() < 1e-12);
    }
}

#[test]
fn attention_with_empty_prefix_matches_no_prefix_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let q = rand_tensor(&mut rng, &[6, 4]);
    let k = rand_tensor(&mut rng, &[6, 4]);
    let v = rand_tensor(&mut rng, &[6, 4]);
    let run = |prefix: bool| {
        let mut g = Graph::default();
        let (qv, kv, vv) = (g.constant(&q), g.constant(&k), g.constant(&v));
        let p = if prefix {
            let pk = g.constant(&Tensor::zeros(&[0, 4]));
            let pv = g.constant(&Tensor::zeros(&[0, 4]));
            Some((pk, pv))
        } else {
            None
        };
        let o = g.attention(qv, kv, vv, p, 2, 3, 2).unwrap();
        g.value(o).clone()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..20 {
        for (name, err) in primitive_gradient_errors(seed).unwrap() {
            assert!(err < 1e-4, "seed {seed}: {name} relative error {err}");
        }
    }
}
