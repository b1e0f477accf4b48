use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, AutodiffError, Graph, Mode, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)` over all
/// coordinates of `x`.
///
/// `f` is evaluated on fresh eval-mode graphs. It must be deterministic:
/// two evaluations at `x` that disagree bitwise are a contract error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    finite_diff_check_many(Mode::Eval, |g, v| f(g, v[0]), std::slice::from_ref(x), eps)
}

/// Multi-input form of [`finite_diff_check`]. Every graph is built in
/// `mode`, so train-mode dropout masks are replayed identically.
pub fn finite_diff_check_many<F>(
    mode: Mode,
    f: F,
    xs: &[Tensor],
    eps: f64,
) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::Contract(format!("eps must be positive, got {eps}")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new(mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(AutodiffError::Contract("finite_diff_check needs a scalar function".into()));
        }
        Ok(g.scalar(out))
    };

    let mut g = Graph::new(mode);
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    let base = g.scalar(out);
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let again = eval(xs)?;
    if again.to_bits() != base.to_bits() {
        return Err(AutodiffError::Contract(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut worst = 0.0_f64;
    let mut work = xs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for i in 0..xs[which].numel() {
            let orig = xs[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[i];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Runs [`finite_diff_check_many`] on every graph primitive with random
/// small shapes drawn from `seed`, returning `(name, worst relative error)`.
/// The straight-through op is compared with differences of the softmax
/// forward, since that is the Jacobian it back-propagates.
pub fn primitive_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize| rng.random_range(lo..=5usize);
    let (m, k, n) = (dim(1), dim(1), dim(2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let a = rand_tensor(&mut rng, &[m, k]);
    let b = rand_tensor(&mut rng, &[k, n]);
    let bt = rand_tensor(&mut rng, &[n, k]);
    let c = rand_tensor(&mut rng, &[m, k]);
    let row = rand_tensor(&mut rng, &[1, k]);
    let probe = rand_tensor(&mut rng, &[m, k]);
    let eps = 1e-6;
    let mut out = Vec::new();

    // Contract against a random probe so every output coordinate matters.
    let probe2 = probe.clone();
    let contract = move |g: &mut Graph, y: Var| -> Result<Var, AutodiffError> {
        let p = g.constant(&probe2);
        let prod = g.mul(y, p)?;
        g.sum(prod)
    };

    macro_rules! check {
        ($name:expr, $inputs:expr, $f:expr) => {{
            let err = finite_diff_check_many(Mode::Eval, $f, $inputs, eps)?;
            out.push(($name, err));
        }};
    }

    check!("matmul", &[a.clone(), b.clone()], |g: &mut Graph, v: &[Var]| {
        let y = g.matmul(v[0], v[1])?;
        let t = g.tanh(y)?;
        g.sum(t)
    });
    check!("matmul_t", &[a.clone(), bt.clone()], |g: &mut Graph, v: &[Var]| {
        let y = g.matmul_t(v[0], v[1])?;
        let t = g.tanh(y)?;
        g.sum(t)
    });
    let ct = contract.clone();
    check!("add_sub_mul", &[a.clone(), c.clone()], move |g: &mut Graph, v: &[Var]| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let p = g.mul(d, v[1])?;
        ct(g, p)
    });
    let ct = contract.clone();
    check!("add_tiled", &[a.clone(), row.clone()], move |g: &mut Graph, v: &[Var]| {
        let y = g.add_tiled(v[0], v[1])?;
        let y = g.tanh(y)?;
        ct(g, y)
    });
    let ct = contract.clone();
    check!("scale", &[a.clone()], move |g: &mut Graph, v: &[Var]| {
        let y = g.scale(v[0], -1.7)?;
        ct(g, y)
    });
    let ct = contract.clone();
    check!("softmax", &[a.clone()], move |g: &mut Graph, v: &[Var]| {
        let y = g.softmax(v[0])?;
        ct(g, y)
    });
    let ct = contract.clone();
    check!("log_softmax", &[a.clone()], move |g: &mut Graph, v: &[Var]| {
        let y = g.log_softmax(v[0])?;
        ct(g, y)
    });
    for act in [
        Activation::Relu,
        Activation::Tanh,
        Activation::LeakyRelu,
        Activation::Gelu,
    ] {
        let ct = contract.clone();
        // Keep inputs away from the relu kink.
        let mut shifted = a.clone();
        shifted
            .data_mut()
            .iter_mut()
            .for_each(|x| if x.abs() < 1e-3 { *x += 0.01 });
        check!(act.name(), &[shifted], move |g: &mut Graph, v: &[Var]| {
            let y = g.activation(v[0], act)?;
            ct(g, y)
        });
    }
    let gain = rand_tensor(&mut rng, &[k]);
    let bias = rand_tensor(&mut rng, &[k]);
    if k >= 2 {
        let ct = contract.clone();
        check!("layer_norm", &[a.clone(), gain, bias], move |g: &mut Graph, v: &[Var]| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            ct(g, y)
        });
    }
    let ct = contract.clone();
    let dmode = Mode::Train { seed, step: 1 };
    let err = finite_diff_check_many(
        dmode,
        move |g: &mut Graph, v: &[Var]| {
            let y = g.dropout(v[0], 0.3, 5)?;
            ct(g, y)
        },
        &[a.clone()],
        eps,
    )?;
    out.push(("dropout", err));
    check!("concat_slice", &[a.clone(), c.clone()], |g: &mut Graph, v: &[Var]| {
        let y = g.concat_rows(&[v[0], v[1]])?;
        let r = g.slice_rows(y, 1, y_rows(g, y) - 1)?;
        let s = g.slice_cols(r, 0, 1)?;
        let t = g.tanh(s)?;
        let q = g.mul(t, t)?;
        g.sum(q)
    });
    let table = rand_tensor(&mut rng, &[6, k]);
    let ids = vec![0usize, 3, 3, 5];
    check!("embedding_pool", &[table], move |g: &mut Graph, v: &[Var]| {
        let e = g.embedding(v[0], &ids)?;
        let p = g.mean_pool(e, 2)?;
        let t = g.tanh(p)?;
        g.sum(t)
    });
    let targets: Vec<usize> = (0..m).map(|i| i % n).collect();
    check!("cross_entropy", &[rand_tensor(&mut rng, &[m, n])], move |g: &mut Graph, v: &[Var]| {
        g.cross_entropy(v[0], &targets)
    });
    let ys: Vec<f64> = (0..m).map(|i| i as f64 * 0.3 - 0.5).collect();
    check!("mse", &[rand_tensor(&mut rng, &[m, 1])], move |g: &mut Graph, v: &[Var]| {
        g.mse(v[0], &ys)
    });
    let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[m, k])).collect();
    let w = rand_tensor(&mut rng, &[3]);
    let mut inputs = xs.clone();
    inputs.push(w);
    let ct = contract.clone();
    check!("weighted_sum", &inputs, move |g: &mut Graph, v: &[Var]| {
        let y = g.weighted_sum(&v[..3], v[3])?;
        ct(g, y)
    });
    check!("mean_reshape", &[a.clone()], |g: &mut Graph, v: &[Var]| {
        let r = g.reshape(v[0], &[y_numel(g, v[0])])?;
        let t = g.tanh(r)?;
        g.mean(t)
    });
    let mut simplex = vec![0.0; 4];
    let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    simplex.iter_mut().zip(&raw).for_each(|(s, r)| *s = r / total);
    check!("entropy", &[Tensor::vector(simplex)], |g: &mut Graph, v: &[Var]| g.entropy(v[0]));
    let logits = rand_tensor(&mut rng, &[4]);
    let probe4 = rand_tensor(&mut rng, &[4]);
    // The straight-through backward is the softmax Jacobian, so compare it
    // with differences of the softmax forward.
    let mut g = Graph::default();
    let lv = g.param(&logits);
    let st = g.straight_through(lv)?;
    let pv = g.constant(&probe4);
    let prod = g.mul(st, pv)?;
    let s = g.sum(prod)?;
    g.backward(s)?;
    let st_grad = g.grad(lv).map_or_else(|| vec![0.0; 4], <[f64]>::to_vec);
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        let f = |delta: f64| -> Result<f64, AutodiffError> {
            let mut x = logits.clone();
            x.data_mut()[i] += delta;
            let mut g = Graph::default();
            let v = g.constant(&x);
            let sm = g.softmax(v)?;
            Ok(g.value(sm).data().iter().zip(probe4.data()).map(|(a, b)| a * b).sum::<f64>())
        };
        let num = (f(eps)? - f(-eps)?) / (2.0 * eps);
        worst = worst.max((num - st_grad[i]).abs() / 1f64.max(num.abs()));
    }
    out.push(("straight_through", worst));

    let (b_, s_, h_) = (2, 3, 2);
    let d_ = 4;
    let l_ = (seed % 3) as usize;
    let q = rand_tensor(&mut rng, &[b_ * s_, d_]);
    let kk = rand_tensor(&mut rng, &[b_ * s_, d_]);
    let vv = rand_tensor(&mut rng, &[b_ * s_, d_]);
    let pk = rand_tensor(&mut rng, &[l_, d_]);
    let pvv = rand_tensor(&mut rng, &[l_, d_]);
    let probe_o = rand_tensor(&mut rng, &[b_ * s_, d_]);
    check!("attention", &[q, kk, vv, pk, pvv], move |g: &mut Graph, v: &[Var]| {
        let o = g.attention(v[0], v[1], v[2], Some((v[3], v[4])), b_, s_, h_)?;
        let p = g.constant(&probe_o);
        let prod = g.mul(o, p)?;
        g.sum(prod)
    });
    Ok(out)
}

fn y_rows(g: &Graph, v: Var) -> usize {
    g.value(v).rows()
}

fn y_numel(g: &Graph, v: Var) -> usize {
    g.value(v).numel()
}
