use proptest::prelude::{any, prop, prop_assert, proptest, ProptestConfig};

use super::*;
use crate::autodiff::{finite_diff_check_many, Mode};
use crate::model::PrefixKV;
use crate::rng::substream;

fn small_space(n_layers: usize, k: usize) -> SearchSpace {
    SearchSpace {
        n_layers,
        ops_per_layer: k,
        ..SearchSpace::default()
    }
}

fn gen(n_layers: usize, k: usize, len: usize, seed: u64) -> PrefixGenerator {
    PrefixGenerator::init(&small_space(n_layers, k), 4, 2, len, &mut substream(seed, "gen", &[])).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn prefix_diff(a: &PrefixKV, b: &PrefixKV) -> f64 {
    a.keys
        .iter()
        .chain(&a.values)
        .zip(b.keys.iter().chain(&b.values))
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max)
}

#[test]
fn catalog_covers_activations_and_rates() {
    let ops = default_catalog(6).unwrap();
    for act in [Activation::Relu, Activation::Tanh, Activation::LeakyRelu, Activation::Gelu] {
        assert!(ops.iter().any(|o| o.activation == act));
    }
    for p in [0.1, 0.3, 0.5] {
        assert!(ops.iter().any(|o| o.dropout_p == p));
    }
    assert!(default_catalog(1).is_err() && default_catalog(13).is_err());
    let skip = SearchSpace {
        allow_skip: true,
        ..SearchSpace::default()
    };
    assert!(matches!(skip.validate(), Err(PrefixError::Config(_))));
}

#[test]
fn softmax_mixture_examples() {
    let w = mixture_weights(&[0.0, 0.0, 0.0], Strategy::Softmax, 1.0, 0).unwrap();
    assert!(close(&w, &[1.0 / 3.0; 3], 1e-15));
    let w = mixture_weights(&[2f64.ln(), 0.0], Strategy::Softmax, 1.0, 0).unwrap();
    assert!(close(&w, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    let a = [0.3, -1.2, 2.5, 0.0];
    let shifted: Vec<f64> = a.iter().map(|v| v + 17.25).collect();
    assert!(close(
        &mixture_weights(&a, Strategy::Softmax, 1.0, 0).unwrap(),
        &mixture_weights(&shifted, Strategy::Softmax, 1.0, 0).unwrap(),
        1e-12
    ));
}

#[test]
fn ste_forward_is_one_hot() {
    assert_eq!(mixture_weights(&[0.2, 0.9], Strategy::Ste, 1.0, 0).unwrap(), vec![0.0, 1.0]);
    assert_eq!(mixture_weights(&[0.5, 0.5], Strategy::Ste, 1.0, 0).unwrap(), vec![1.0, 0.0]);
}

#[test]
fn gumbel_temperature_must_be_positive() {
    for t in [0.0, -1.0, f64::NAN] {
        assert!(matches!(mixture_weights(&[0.0, 1.0], Strategy::Gumbel, t, 3), Err(PrefixError::Parameter(_))));
    }
    assert!(mixture_weights(&[0.0], Strategy::Softmax, 1.0, 0).is_err());
}

#[test]
fn gumbel_temperature_limits() {
    let alpha = [0.4, -0.3, 1.1, 0.0, 0.2];
    for key in 0..50u64 {
        let hot = mixture_weights(&alpha, Strategy::Gumbel, 100.0, key).unwrap();
        assert!(hot.iter().all(|&w| (w - 0.2).abs() < 0.02), "{hot:?}");
        let cold = mixture_weights(&alpha, Strategy::Gumbel, 0.01, key).unwrap();
        let noise = gumbel_noise(key, alpha.len());
        let perturbed: Vec<f64> = alpha.iter().zip(&noise).map(|(a, n)| a + n).collect();
        assert_eq!(argmax(&cold), argmax(&perturbed));
    }
}

#[test]
fn entropy_spot_values() {
    let uniform = ArchParams::uniform(1, 4, Parameterization::Softmax);
    assert!((entropy_regularizer(&uniform) - 4f64.ln()).abs() < 1e-15);
    let two = ArchParams::from_rows(vec![vec![1.0, 0.0]], Parameterization::Softmax).unwrap();
    // mpmath at 30 digits: 0.582203108888217954797836253146
    assert!((entropy_regularizer(&two) - 0.582_203_108_888_218).abs() < 1e-14);
    let peaked = ArchParams::from_rows(vec![vec![10.0, 0.0, 0.0, 0.0]], Parameterization::Softmax).unwrap();
    // mpmath: 0.00149800292924892102189845579217
    assert!((entropy_regularizer(&peaked) - 0.001_498_002_929_248_921).abs() < 1e-15);
    let multi = ArchParams::uniform(6, 5, Parameterization::Simplex);
    assert!((entropy_regularizer(&multi) - 6.0 * 5f64.ln()).abs() < 1e-12);
}

#[test]
fn entropy_graph_matches_numeric() {
    let alpha = ArchParams::from_rows(vec![vec![0.3, -0.7, 1.2], vec![2.0, 0.0]], Parameterization::Softmax).unwrap();
    let mut g = Graph::default();
    let rows = alpha.bind(&mut g, false);
    let h = entropy_var(&mut g, &rows, Parameterization::Softmax).unwrap();
    assert!((g.scalar(h) - entropy_regularizer(&alpha)).abs() < 1e-14);
}

#[test]
fn discretize_and_l1_distance() {
    let a = ArchParams::from_rows(vec![vec![0.2, 0.9, 0.1], vec![0.5, 0.5]], Parameterization::Softmax).unwrap();
    assert_eq!(discretize(&a), vec![1, 0]);
    let s = ArchParams::from_rows(vec![vec![0.9, 0.06, 0.04]], Parameterization::Simplex).unwrap();
    assert!((l1_discretization_distance(&s)[0] - 0.2).abs() < 1e-15);
    let hot = ArchParams::from_rows(vec![vec![0.0, 1.0, 0.0]], Parameterization::Simplex).unwrap();
    assert_eq!(l1_discretization_distance(&hot), vec![0.0]);
    assert_eq!(l2_discretization_distance(&hot), 0.0);
}

#[test]
fn mixed_layer_examples() {
    let id_op = CandidateOp {
        activation: Activation::Identity,
        dropout_p: 0.0,
        layer_norm: false,
    };
    let mut g = Graph::default();
    let x = g.constant(&Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let w2 = g.constant(&Tensor::matrix(1, 1, vec![2.0]).unwrap());
    let w3 = g.constant(&Tensor::matrix(1, 1, vec![3.0]).unwrap());
    let b = g.constant(&Tensor::zeros(&[1]));
    let half = g.constant(&Tensor::vector(vec![0.5, 0.5]));
    let y = mixed_layer_forward(&mut g, x, &[id_op, id_op], &[(w2, b), (w3, b)], half, 0).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
    let onehot = g.constant(&Tensor::vector(vec![0.0, 1.0]));
    let y = mixed_layer_forward(&mut g, x, &[id_op, id_op], &[(w2, b), (w3, b)], onehot, 0).unwrap();
    assert_eq!(g.value(y).data(), &[3.0]);
    let same = g.constant(&Tensor::vector(vec![0.3, 0.7]));
    let y = mixed_layer_forward(&mut g, x, &[id_op, id_op], &[(w2, b), (w2, b)], same, 0).unwrap();
    assert!((g.value(y).data()[0] - 2.0).abs() < 1e-15);
}

#[test]
fn mixed_layer_width_mismatch() {
    let op = default_catalog(2).unwrap()[0];
    let mut g = Graph::default();
    let x = g.constant(&Tensor::zeros(&[2, 3]));
    let w = g.constant(&Tensor::zeros(&[3, 4]));
    let b = g.constant(&Tensor::zeros(&[3]));
    let wt = g.constant(&Tensor::vector(vec![1.0]));
    assert!(matches!(
        mixed_layer_forward(&mut g, x, &[op], &[(w, b)], wt, 0),
        Err(PrefixError::Autodiff(crate::autodiff::AutodiffError::ShapeMismatch { .. }))
    ));
}

#[test]
fn prefix_shapes_and_determinism() {
    let g = gen(3, 4, 5, 1);
    let alpha = ArchParams::uniform(3, 4, Parameterization::Softmax);
    for strategy in Strategy::ALL {
        let ctx = RelaxContext {
            strategy,
            temperature: 0.7,
            noise_key: 9,
        };
        for mode in [Mode::Eval, Mode::Train { seed: 3, step: 8 }] {
            let a = g.prefix(Some(&alpha), &ctx, mode).unwrap();
            let b = g.prefix(Some(&alpha), &ctx, mode).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len, 5);
            assert!(a.keys.iter().chain(&a.values).all(|t| t.shape() == [5, 4]));
            assert_eq!(a.keys.len(), 2);
        }
    }
    let empty = gen(2, 3, 0, 2).prefix(Some(&ArchParams::uniform(2, 3, Parameterization::Softmax)), &RelaxContext::default(), Mode::Eval).unwrap();
    assert_eq!(empty.len, 0);
    assert!(empty.keys.iter().all(|t| t.shape() == [0, 4]));
}

#[test]
fn eval_mode_disables_dropout() {
    let g = gen(2, 3, 3, 4);
    let alpha = ArchParams::uniform(2, 3, Parameterization::Softmax);
    let ctx = RelaxContext::default();
    let e1 = g.prefix(Some(&alpha), &ctx, Mode::Eval).unwrap();
    let t1 = g.prefix(Some(&alpha), &ctx, Mode::Train { seed: 1, step: 0 }).unwrap();
    let t2 = g.prefix(Some(&alpha), &ctx, Mode::Train { seed: 1, step: 1 }).unwrap();
    assert!(prefix_diff(&e1, &t1) > 0.0);
    assert!(prefix_diff(&t1, &t2) > 0.0);
}

#[test]
fn discretized_generator_matches_one_hot_mixture() {
    let mut g = gen(3, 4, 4, 5);
    let alpha = ArchParams::from_rows(
        vec![vec![0.1, 0.7, 0.2, 0.0], vec![1.0, 0.0, 0.3, 0.2], vec![0.0, 0.0, 0.0, 0.9]],
        Parameterization::Softmax,
    )
    .unwrap();
    let choice = discretize(&alpha);
    let one_hot = ArchParams::from_rows(
        choice
            .iter()
            .map(|&j| (0..4).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
        Parameterization::Simplex,
    )
    .unwrap();
    for mode in [Mode::Eval, Mode::Train { seed: 2, step: 5 }] {
        let mixed = g.prefix(Some(&one_hot), &RelaxContext::default(), mode).unwrap();
        let mut single = g.clone();
        single.fix_architecture(&choice).unwrap();
        let path = single.prefix(None, &RelaxContext::default(), mode).unwrap();
        assert!(prefix_diff(&mixed, &path) < 1e-10);
    }
    assert!(g.prefix(None, &RelaxContext::default(), Mode::Eval).is_err());
    assert!(g.fix_architecture(&[0, 0]).is_err());
}

#[test]
fn prune_examples() {
    let mut uniform = ArchParams::uniform(2, 5, Parameterization::Softmax);
    let out = prune_weak(&mut uniform, 0.19).unwrap();
    assert_eq!(out.kept, vec![vec![0, 1, 2, 3, 4]; 2]);

    let mut a = ArchParams::from_rows(vec![vec![0.9f64.ln(), 0.07f64.ln(), 0.03f64.ln()]], Parameterization::Softmax).unwrap();
    let out = prune_weak(&mut a, 0.05).unwrap();
    assert_eq!(out.kept, vec![vec![0, 1]]);
    let p = &a.probabilities()[0];
    assert!((p[0] - 0.9278).abs() < 1e-4 && (p[1] - 0.0722).abs() < 1e-4);

    let mut s = ArchParams::from_rows(vec![vec![0.9, 0.07, 0.03]], Parameterization::Simplex).unwrap();
    prune_weak(&mut s, 0.05).unwrap();
    let row = s.rows[0].data();
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12 && row.iter().all(|&v| v >= 0.0));

    let mut bad = ArchParams::uniform(1, 4, Parameterization::Softmax);
    assert!(matches!(prune_weak(&mut bad, 0.25), Err(PrefixError::Parameter(_))));
    assert!(matches!(prune_weak(&mut bad, 0.0), Err(PrefixError::Parameter(_))));
}

#[test]
fn prune_never_removes_argmax() {
    let mut a = ArchParams::from_rows(vec![vec![0.0, 0.0, 0.0, 0.0]], Parameterization::Softmax).unwrap();
    a.rows[0].data_mut()[2] = 1e-9;
    let out = prune_weak(&mut a, 0.24).unwrap();
    assert!(out.kept[0].contains(&2));
}

#[test]
fn pruned_forward_equals_renormalized_mixture() {
    let mut g = gen(2, 4, 3, 6);
    let logits = vec![vec![2.0, -3.0, 0.5, -4.0], vec![-5.0, 1.0, 1.5, 0.0]];
    let mut alpha = ArchParams::from_rows(logits.clone(), Parameterization::Softmax).unwrap();
    let reference_gen = g.clone();
    let out = prune_weak(&mut alpha, 0.05).unwrap();
    assert!(out.removed_any(&[4, 4]));
    g.retain_ops(&out.kept).unwrap();
    g.check_alpha(&alpha).unwrap();

    let masked: Vec<Vec<f64>> = logits
        .iter()
        .zip(&out.kept)
        .map(|(row, keep)| {
            let p = softmax(row);
            let z: f64 = keep.iter().map(|&j| p[j]).sum();
            (0..row.len()).map(|j| if keep.contains(&j) { p[j] / z } else { 0.0 }).collect()
        })
        .collect();
    let masked = ArchParams::from_rows(masked, Parameterization::Simplex).unwrap();
    for mode in [Mode::Eval, Mode::Train { seed: 4, step: 2 }] {
        let pruned = g.prefix(Some(&alpha), &RelaxContext::default(), mode).unwrap();
        let reference = reference_gen.prefix(Some(&masked), &RelaxContext::default(), mode).unwrap();
        assert!(prefix_diff(&pruned, &reference) < 1e-10);
    }
}

#[test]
fn simplex_rejects_gumbel_and_ste() {
    let g = gen(2, 3, 2, 7);
    let alpha = ArchParams::uniform(2, 3, Parameterization::Simplex);
    for strategy in [Strategy::Gumbel, Strategy::Ste] {
        let ctx = RelaxContext {
            strategy,
            ..RelaxContext::default()
        };
        assert!(matches!(g.prefix(Some(&alpha), &ctx, Mode::Eval), Err(PrefixError::Parameter(_))));
    }
}

fn prefix_loss(
    gen: &PrefixGenerator,
    ctx: RelaxContext,
    n_rows: usize,
) -> impl Fn(&mut Graph, &[Var]) -> Result<Var, crate::autodiff::AutodiffError> + '_ {
    move |g, v| {
        let arch = ArchVars {
            rows: v[..n_rows].to_vec(),
            parameterization: Parameterization::Softmax,
        };
        let gv = gen.vars_from(&v[n_rows..]);
        let p = generate_prefix(g, gen, &gv, Some(&arch), &ctx).map_err(|e| match e {
            PrefixError::Autodiff(a) => a,
            other => crate::autodiff::AutodiffError::Contract(other.to_string()),
        })?;
        let mut total = None;
        for (i, &t) in p.keys.iter().chain(&p.values).enumerate() {
            let sq = g.mul(t, t)?;
            let s = g.sum(sq)?;
            let s = g.scale(s, 1.0 / (i + 1) as f64)?;
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        Ok(total.expect("at least one block"))
    }
}

#[test]
fn alpha_gradients_match_finite_differences() {
    for (seed, strategy) in [(0, Strategy::Softmax), (1, Strategy::Gumbel), (2, Strategy::Softmax), (3, Strategy::Gumbel)] {
        let g = gen(2, 3, 2, seed);
        let mut rng = substream(seed, "alpha", &[]);
        let alpha = ArchParams {
            rows: vec![Tensor::randn(&[3], 0.5, &mut rng), Tensor::randn(&[3], 0.5, &mut rng)],
            parameterization: Parameterization::Softmax,
        };
        let ctx = RelaxContext {
            strategy,
            temperature: 0.8,
            noise_key: seed,
        };
        let mut inputs: Vec<Tensor> = alpha.rows.clone();
        inputs.extend(g.named().into_iter().map(|(_, t)| t.clone()));
        let err = finite_diff_check_many(Mode::Train { seed, step: 1 }, prefix_loss(&g, ctx, 2), &inputs, 1e-6).unwrap();
        assert!(err < 1e-4, "{strategy:?} seed {seed}: {err}");
    }
}

#[test]
fn architecture_export_lists_choices() {
    let g = gen(2, 3, 2, 8);
    let alpha = ArchParams::from_rows(vec![vec![0.0, 2.0, 0.0], vec![1.0, 0.0, 0.0]], Parameterization::Softmax).unwrap();
    let export = export_architecture(&g, &alpha).unwrap();
    assert_eq!(export.layers[0].op_id, 1);
    assert_eq!(export.layers[1].op_id, 0);
    let json = serde_json::to_string(&export).unwrap();
    assert!(json.contains("\"activation\":\"tanh\""));
    assert!(export_architecture(&g, &ArchParams::uniform(3, 3, Parameterization::Softmax)).is_err());
}

fn kkt_projection(v: &[f64]) -> Vec<f64> {
    // Bisection on θ in Σ max(v − θ, 0) = 1.
    let (mut lo, mut hi) = (v.iter().copied().fold(f64::INFINITY, f64::min) - 1.0, v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s: f64 = v.iter().map(|x| (x - mid).max(0.0)).sum();
        if s > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    v.iter().map(|x| (x - 0.5 * (lo + hi)).max(0.0)).collect()
}

#[test]
fn projection_examples() {
    assert!(close(&project_simplex(&[0.2, 0.3, 0.5]), &[0.2, 0.3, 0.5], 1e-15));
    assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
    assert!(close(&project_simplex(&[0.5, 0.5, 0.5]), &[1.0 / 3.0; 3], 1e-15));
    assert_eq!(project_simplex(&[-3.0]), vec![1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mixture_weights_are_distributions(
        row in prop::collection::vec(-20.0f64..20.0, 2..8),
        t in 0.01f64..50.0,
        key in any::<u64>(),
    ) {
        for s in Strategy::ALL {
            let w = mixture_weights(&row, s, t, key).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn entropy_decreases_toward_a_vertex(
        row in prop::collection::vec(-2.0f64..2.0, 2..7),
        j in 0usize..7,
    ) {
        let k = row.len();
        let j = j % k;
        let h = |scale: f64| {
            let r: Vec<f64> = (0..k).map(|i| if i == j { scale } else { 0.0 }).collect();
            entropy_regularizer(&ArchParams::from_rows(vec![r], Parameterization::Softmax).unwrap())
        };
        prop_assert!((h(0.0) - (k as f64).ln()).abs() < 1e-12);
        let mut prev = h(0.0);
        for step in 1..20 {
            let cur = h(step as f64 * 0.5);
            prop_assert!(cur < prev);
            prev = cur;
        }
        let a = ArchParams::from_rows(vec![row.clone()], Parameterization::Softmax).unwrap();
        prop_assert!(entropy_regularizer(&a) <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn l1_distance_identity(row in prop::collection::vec(-5.0f64..5.0, 2..7)) {
        let a = ArchParams::from_rows(vec![row], Parameterization::Softmax).unwrap();
        let p = &a.probabilities()[0];
        let max = p.iter().copied().fold(0.0, f64::max);
        prop_assert!((l1_discretization_distance(&a)[0] - 2.0 * (1.0 - max)).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_kkt_oracle(v in prop::collection::vec(-3.0f64..3.0, 1..6)) {
        let p = project_simplex(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(close(&p, &kkt_projection(&v), 1e-9));
        prop_assert!(close(&project_simplex(&p), &p, 1e-12));
    }

    #[test]
    fn projection_is_non_expansive(
        x in prop::collection::vec(-3.0f64..3.0, 4),
        y in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let (px, py) = (project_simplex(&x), project_simplex(&y));
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d(&px, &py) <= d(&x, &y) + 1e-12);
    }
}
