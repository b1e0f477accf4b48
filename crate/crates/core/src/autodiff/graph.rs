use serde::{Deserialize, Serialize};

use super::tensor::{matmul_into, matmul_t_acc, matmul_tn_acc, Tensor};
use super::AutodiffError;
use crate::rng::{counter_uniform, hash_words};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward-pass mode. Dropout is active only in `Train`, where masks are a
/// pure function of `(seed, step, site, element)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64, step: u64 },
}

/// Pointwise nonlinearities.
///
/// `Gelu` is the tanh approximation
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    LeakyRelu,
    Gelu,
}

const LEAKY_SLOPE: f64 = 0.01;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;
const ENTROPY_FLOOR: f64 = 1e-12;

/// tanh through a single `exp`. Absolute error is a few ulps.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Gelu => 0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x))),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Gelu => {
                let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Gelu => "gelu",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPool {
        x: Var,
        group: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Attention(Box<AttentionCache>),
    StraightThrough {
        x: Var,
        probs: Vec<f64>,
    },
    Entropy(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    batch: usize,
    seq: usize,
    heads: usize,
    prefix_len: usize,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes may only reference earlier nodes, so insertion order is a
/// topological order and the graph is acyclic by construction.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Mode::Eval)
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reachable from it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Trainable leaf (gradient tracked).
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.clear_grad();
        value.set_requires_grad(true);
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.constant_owned(t.clone())
    }

    pub fn constant_owned(&mut self, mut t: Tensor) -> Var {
        t.clear_grad();
        t.set_requires_grad(false);
        self.nodes.push(Node { op: Op::Leaf, value: t });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op,
        mut value: Tensor,
        inputs: &[Var],
    ) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        value.set_requires_grad(self.needs(inputs));
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k || ta.shape().len() > 2 || tb.shape().len() > 2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        self.push("matmul", Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), &[a, b])
    }

    /// `a[m×k] · b[n×k]ᵀ`, the row-major form of applying a weight `b` stored
    /// as (out × in).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k || tb.shape().len() > 2 {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_t_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push("matmul_t", Op::MatMulT(a, b), Tensor::from_parts(vec![m, n], out), &[a, b])
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, op, t, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + tile(y)`: the rows of `y` repeat cyclically down the rows of `x`.
    /// Covers bias broadcast (`y` is one row) and positional embeddings.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var, AutodiffError> {
        let (tx, ty) = (self.value(x), self.value(y));
        let (c, ry) = (tx.cols(), ty.rows());
        if ty.cols() != c || ry == 0 || tx.rows() % ry != 0 {
            return Err(mismatch("add_tiled", tx, ty));
        }
        let block = ry * c;
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(block) {
            add_into(chunk, ty.data());
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_tiled", Op::AddTiled(x, y), t, &[x, y])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("scale", Op::Scale(x, s), t, &[x])
    }

    /// `Σ_j weights[j] · inputs[j]`; `weights` holds one entry per input.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var, AutodiffError> {
        let tw = self.value(weights);
        if inputs.is_empty() || tw.numel() != inputs.len() {
            return Err(AutodiffError::Contract(format!(
                "weighted_sum needs one weight per input ({} weights, {} inputs)",
                tw.numel(),
                inputs.len()
            )));
        }
        let w = tw.data().to_vec();
        let first = self.value(inputs[0]);
        let shape = first.shape().to_vec();
        let mut out = vec![0.0; first.numel()];
        for (j, &inp) in inputs.iter().enumerate() {
            let ti = self.value(inp);
            if ti.shape() != shape.as_slice() {
                return Err(mismatch("weighted_sum", self.value(inputs[0]), ti));
            }
            let wj = w[j];
            for (o, &v) in out.iter_mut().zip(ti.data()) {
                *o += wj * v;
            }
        }
        let mut all = inputs.to_vec();
        all.push(weights);
        let t = Tensor::from_parts(shape, out);
        self.push(
            "weighted_sum",
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
            },
            t,
            &all,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = vec![0.0; tx.numel()];
        for (row, orow) in tx.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(row, orow);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("softmax", Op::Softmax(x), t, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(c) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("log_softmax", Op::LogSoftmax(x), t, &[x])
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var, AutodiffError> {
        if act == Activation::Identity {
            return Ok(x);
        }
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| act.apply(v)).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(act.name(), Op::Act(x, act), t, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(x, Activation::Tanh)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(x, Activation::LeakyRelu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(x, Activation::Gelu)
    }

    /// Layer normalization over the last axis with learnable `gain` and
    /// `bias` (each one row of width `cols`), epsilon `1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.numel() != c {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.numel() != c {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            "layer_norm",
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            t,
            &[x, gain, bias],
        )
    }

    /// Inverted dropout with keep-scaling `1/(1-p)`. In eval mode, or when
    /// `p == 0`, returns `x` itself. `site` distinguishes call sites within
    /// one forward pass.
    pub fn dropout(&mut self, x: Var, p: f64, site: u64) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::Contract(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let (seed, step) = match self.mode {
            Mode::Train { seed, step } if p > 0.0 => (seed, step),
            _ => return Ok(x),
        };
        let key = hash_words(&[seed, step, site]);
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.numel() as u64)
            .map(|i| if counter_uniform(key, i) < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("dropout", Op::Dropout { x, mask }, t, &[x])
    }

    /// Concatenates 2-D tensors along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Contract("concat_rows of nothing".into()));
        };
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != c {
                return Err(mismatch("concat_rows", self.value(first), tp));
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let t = Tensor::from_parts(vec![rows, c], data);
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), t, parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let c = tx.cols();
        if start + len > tx.rows() {
            return Err(AutodiffError::Contract(format!(
                "slice_rows {start}..{} of shape {:?}",
                start + len,
                tx.shape()
            )));
        }
        let data = tx.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::from_parts(vec![len, c], data);
        self.push("slice_rows", Op::SliceRows { x, start }, t, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if start + len > c {
            return Err(AutodiffError::Contract(format!(
                "slice_cols {start}..{} of shape {:?}",
                start + len,
                tx.shape()
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in tx.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::from_parts(vec![r, len], data);
        self.push("slice_cols", Op::SliceCols { x, start }, t, &[x])
    }

    /// Row lookup into `table[vocab×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::Contract(format!(
                    "token id {id} out of range for vocabulary of {v}"
                )));
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], data);
        self.push(
            "embedding",
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            t,
            &[table],
        )
    }

    /// Averages consecutive groups of `group` rows: `[b·group×d] → [b×d]`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if group == 0 || r % group != 0 {
            return Err(AutodiffError::Contract(format!(
                "mean_pool group {group} does not divide {r} rows"
            )));
        }
        let b = r / group;
        let mut out = vec![0.0; b * c];
        for (i, row) in tx.data().chunks(c).enumerate() {
            add_into(&mut out[(i / group) * c..(i / group + 1) * c], row);
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::from_parts(vec![b, c], out);
        self.push("mean_pool", Op::MeanPool { x, group }, t, &[x])
    }

    /// Mean cross-entropy of `logits[b×c]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let tl = self.value(logits);
        let (b, c) = (tl.rows(), tl.cols());
        if targets.len() != b || b == 0 {
            return Err(AutodiffError::Contract(format!(
                "cross_entropy: {} targets for {b} rows",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(AutodiffError::Contract(format!(
                    "cross_entropy: class {y} out of range for {c} classes"
                )));
            }
            let row = &tl.data()[i * c..(i + 1) * c];
            loss += log_sum_exp(row) - row[y];
            softmax_row(row, &mut probs[i * c..(i + 1) * c]);
        }
        let t = Tensor::scalar(loss / b as f64);
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            t,
            &[logits],
        )
    }

    /// Mean squared error of `pred` (one value per row) against targets.
    pub fn mse(&mut self, pred: Var, targets: &[f64]) -> Result<Var, AutodiffError> {
        let tp = self.value(pred);
        if tp.numel() != targets.len() || targets.is_empty() {
            return Err(AutodiffError::Contract(format!(
                "mse: {} targets for {} predictions",
                targets.len(),
                tp.numel()
            )));
        }
        let n = targets.len() as f64;
        let loss = tp
            .data()
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / n;
        self.push(
            "mse",
            Op::Mse {
                pred,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
            &[pred],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(AutodiffError::Contract("mean of empty tensor".into()));
        }
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        self.push("mean", Op::Mean(x), Tensor::scalar(s), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() || shape.is_empty() {
            return Err(AutodiffError::Contract(format!(
                "cannot reshape {:?} to {shape:?}",
                tx.shape()
            )));
        }
        let t = Tensor::from_parts(shape.to_vec(), tx.data().to_vec());
        self.push("reshape", Op::Reshape(x), t, &[x])
    }

    /// Forward value is the one-hot of `argmax(x)` (lowest index on ties);
    /// backward uses the softmax Jacobian at `x`.
    pub fn straight_through(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut probs = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        for (r, row) in tx.data().chunks(c).enumerate() {
            softmax_row(row, &mut probs[r * c..(r + 1) * c]);
            out[r * c + argmax(row)] = 1.0;
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("straight_through", Op::StraightThrough { x, probs }, t, &[x])
    }

    /// `-Σ p·ln p` over all entries of a probability tensor, with `ln` floored
    /// at `1e-12` so vertices of the simplex stay differentiable.
    pub fn entropy(&mut self, p: Var) -> Result<Var, AutodiffError> {
        let tp = self.value(p);
        if tp.data().iter().any(|&v| v < 0.0) {
            return Err(AutodiffError::Contract("entropy of negative mass".into()));
        }
        let h = -tp
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v * v.max(ENTROPY_FLOOR).ln() } else { 0.0 })
            .sum::<f64>();
        self.push("entropy", Op::Entropy(p), Tensor::scalar(h), &[p])
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq` (rows of `q`, `k`, `v` are `batch·seq` tokens of width
    /// `d`). When `prefix = Some((pk, pv))`, the `l` prefix rows are
    /// prepended to every sequence's keys and values; each head uses its own
    /// column slice of the prefix.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, AutodiffError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.shape() != tq.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        if tv.shape() != tq.shape() {
            return Err(mismatch("attention", tq, tv));
        }
        if heads == 0 || d % heads != 0 || tq.rows() != batch * seq {
            return Err(AutodiffError::Contract(format!(
                "attention: {} rows, batch {batch}, seq {seq}, width {d}, heads {heads}",
                tq.rows()
            )));
        }
        let (pk_data, pv_data, l) = match prefix {
            Some((pk, pv)) => {
                let (tpk, tpv) = (self.value(pk), self.value(pv));
                if tpk.cols() != d {
                    return Err(mismatch("attention prefix keys", tq, tpk));
                }
                if tpv.shape() != tpk.shape() {
                    return Err(mismatch("attention prefix values", tpk, tpv));
                }
                (tpk.data(), tpv.data(), tpk.rows())
            }
            None => (&[][..], &[][..], 0),
        };
        let dh = d / heads;
        let span = l + seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * span];
        let mut out = vec![0.0; batch * seq * d];
        let mut scores = vec![0.0; span];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for e in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(e * seq + i) * d + off..(e * seq + i) * d + off + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let key = if j < l {
                            &pk_data[j * d + off..j * d + off + dh]
                        } else {
                            let r = e * seq + j - l;
                            &kd[r * d + off..r * d + off + dh]
                        };
                        *s = qi.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let base = ((e * heads + h) * seq + i) * span;
                    let prow = &mut probs[base..base + span];
                    softmax_row(&scores, prow);
                    let orow = &mut out[(e * seq + i) * d + off..(e * seq + i) * d + off + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let val = if j < l {
                            &pv_data[j * d + off..j * d + off + dh]
                        } else {
                            let r = e * seq + j - l;
                            &vd[r * d + off..r * d + off + dh]
                        };
                        for (o, &x) in orow.iter_mut().zip(val) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![batch * seq, d], out);
        let mut inputs = vec![q, k, v];
        if let Some((pk, pv)) = prefix {
            inputs.extend([pk, pv]);
        }
        self.push(
            "attention",
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                prefix,
                batch,
                seq,
                heads,
                prefix_len: l,
                probs,
            })),
            t,
            &inputs,
        )
    }

    /// Attention probabilities saved by an `attention` node, laid out as
    /// `[batch][head][query][prefix_len + seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`. Populates the gradient slot of
    /// every node reachable from `loss` that requires a gradient; fan-out
    /// contributions accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].value.requires_grad();
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].value.requires_grad() {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    // dA = G · Bᵀ
                    acc(*a, &mut |s| matmul_t_acc(g, tb.data(), s, m, n, k));
                }
                if needs(*b) {
                    acc(*b, &mut |s| matmul_tn_acc(ta.data(), g, s, m, k, n));
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if needs(*a) {
                    // dA = G · B
                    acc(*a, &mut |s| matmul_into(g, tb.data(), s, m, n, k));
                }
                if needs(*b) {
                    // dB = Gᵀ · A
                    acc(*b, &mut |s| matmul_tn_acc(g, ta.data(), s, m, n, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((d, gv), bv) in s.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * bv;
                    }
                });
                acc(*b, &mut |s| {
                    for ((d, gv), av) in s.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::AddTiled(x, y) => {
                acc(*x, &mut |s| add_into(s, g));
                let block = val(*y).numel();
                acc(*y, &mut |s| {
                    for chunk in g.chunks(block) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, v)| *d += c * v));
            }
            Op::WeightedSum { inputs, weights } => {
                let w = val(*weights).data();
                for (j, &inp) in inputs.iter().enumerate() {
                    let wj = w[j];
                    acc(inp, &mut |s| s.iter_mut().zip(g).for_each(|(d, v)| *d += wj * v));
                }
                if needs(*weights) {
                    let dw: Vec<f64> = inputs
                        .iter()
                        .map(|&inp| val(inp).data().iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*weights, &mut |s| add_into(s, &dw));
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                acc(*x, &mut |s| {
                    for ((srow, yrow), grow) in
                        s.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for ((d, y), gv) in srow.iter_mut().zip(yrow).zip(grow) {
                            *d += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                acc(*x, &mut |s| {
                    for ((srow, yrow), grow) in
                        s.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c))
                    {
                        let total: f64 = grow.iter().sum();
                        for ((d, y), gv) in srow.iter_mut().zip(yrow).zip(grow) {
                            *d += gv - y.exp() * total;
                        }
                    }
                });
            }
            Op::Act(x, act) => {
                let tx = val(*x);
                acc(*x, &mut |s| {
                    for ((d, xv), gv) in s.iter_mut().zip(tx.data()).zip(g) {
                        *d += gv * act.derivative(*xv);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gd = val(*gain).data();
                if needs(*x) {
                    acc(*x, &mut |s| {
                        for (r, inv) in inv_std.iter().enumerate() {
                            let gr = &g[r * c..(r + 1) * c];
                            let hr = &xhat[r * c..(r + 1) * c];
                            let dxhat: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dh: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                            let n = c as f64;
                            for j in 0..c {
                                s[r * c + j] += inv / n * (n * dxhat[j] - sum_d - hr[j] * sum_dh);
                            }
                        }
                    });
                }
                acc(*gain, &mut |s| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, gv), h) in s.iter_mut().zip(grow).zip(hrow) {
                            *d += gv * h;
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for grow in g.chunks(c) {
                        add_into(s, grow);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |s| {
                    for ((d, gv), m) in s.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                let from = start * c;
                acc(*x, &mut |s| add_into(&mut s[from..from + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let full = val(*x).cols();
                let len = out.cols();
                acc(*x, &mut |s| {
                    for (srow, grow) in s.chunks_mut(full).zip(g.chunks(len)) {
                        add_into(&mut srow[*start..*start + len], grow);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                acc(*table, &mut |s| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::MeanPool { x, group } => {
                let c = out.cols();
                let inv = 1.0 / *group as f64;
                acc(*x, &mut |s| {
                    for (i, srow) in s.chunks_mut(c).enumerate() {
                        let grow = &g[(i / group) * c..(i / group + 1) * c];
                        for (d, gv) in srow.iter_mut().zip(grow) {
                            *d += gv * inv;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = val(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |s| {
                    for (i, &y) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            s[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Mse { pred, targets } => {
                let tp = val(*pred);
                let scale = 2.0 * g[0] / targets.len() as f64;
                acc(*pred, &mut |s| {
                    for ((d, p), y) in s.iter_mut().zip(tp.data()).zip(targets) {
                        *d += scale * (p - y);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Reshape(x) => {
                acc(*x, &mut |s| add_into(s, g));
            }
            Op::StraightThrough { x, probs } => {
                let c = out.cols();
                acc(*x, &mut |s| {
                    for ((srow, prow), grow) in
                        s.chunks_mut(c).zip(probs.chunks(c)).zip(g.chunks(c))
                    {
                        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for ((d, p), gv) in srow.iter_mut().zip(prow).zip(grow) {
                            *d += p * (gv - dot);
                        }
                    }
                });
            }
            Op::Entropy(p) => {
                let tp = val(*p);
                acc(*p, &mut |s| {
                    for (d, &v) in s.iter_mut().zip(tp.data()) {
                        *d -= g[0] * (v.max(ENTROPY_FLOOR).ln() + 1.0);
                    }
                });
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
        }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let (tq, tk, tv) = (
            &nodes[c.q.0].value,
            &nodes[c.k.0].value,
            &nodes[c.v.0].value,
        );
        let d = tq.cols();
        let (batch, seq, heads, l) = (c.batch, c.seq, c.heads, c.prefix_len);
        let dh = d / heads;
        let span = l + seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let (pk, pv) = match c.prefix {
            Some((pk, pv)) => (nodes[pk.0].value.data(), nodes[pv.0].value.data()),
            None => (&[][..], &[][..]),
        };
        let mut dq = vec![0.0; tq.numel()];
        let mut dk = vec![0.0; tk.numel()];
        let mut dv = vec![0.0; tv.numel()];
        let mut dpk = vec![0.0; pk.len()];
        let mut dpv = vec![0.0; pv.len()];
        let mut ds = vec![0.0; span];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for e in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qrow = (e * seq + i) * d + off;
                    let go = &g[qrow..qrow + dh];
                    let base = ((e * heads + h) * seq + i) * span;
                    let prow = &c.probs[base..base + span];
                    let mut dot = 0.0;
                    for j in 0..span {
                        let val = if j < l {
                            &pv[j * d + off..j * d + off + dh]
                        } else {
                            let r = (e * seq + j - l) * d + off;
                            &vd[r..r + dh]
                        };
                        let dp: f64 = go.iter().zip(val).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        dot += prow[j] * dp;
                    }
                    for j in 0..span {
                        ds[j] = prow[j] * (ds[j] - dot) * scale;
                    }
                    let qi = &qd[qrow..qrow + dh];
                    for j in 0..span {
                        let (key, dkey, dval) = if j < l {
                            let r = j * d + off;
                            (&pk[r..r + dh], &mut dpk[r..r + dh], &mut dpv[r..r + dh])
                        } else {
                            let r = (e * seq + j - l) * d + off;
                            (&kd[r..r + dh], &mut dk[r..r + dh], &mut dv[r..r + dh])
                        };
                        let (sj, pj) = (ds[j], prow[j]);
                        for t in 0..dh {
                            dq[qrow + t] += sj * key[t];
                            dkey[t] += sj * qi[t];
                            dval[t] += pj * go[t];
                        }
                    }
                }
            }
        }
        let mut put = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].value.requires_grad() {
                return;
            }
            match &mut grads[v.0] {
                Some(slot) => add_into(slot, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        put(c.q, dq);
        put(c.k, dk);
        put(c.v, dv);
        if let Some((pkv, pvv)) = c.prefix {
            put(pkv, dpk);
            put(pvv, dpv);
        }
    }
}
