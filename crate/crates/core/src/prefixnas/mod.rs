//! Differentiable search over the prefix-generator architecture.
//!
//! Each of the `n_layers` generator layers mixes `k` candidate operations
//! with weights derived from one row of architecture parameters α. Training
//! relaxes the choice (softmax, Gumbel-softmax or straight-through);
//! [`discretize`] then keeps the argmax op per layer.

mod generator;

pub use generator::{generate_prefix, mixed_layer_forward, ArchVars, GeneratorVars, OpWeights, PrefixGenerator, PrefixLayer, RelaxContext};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{argmax, Activation, AutodiffError, Graph, Tensor, Var};
use crate::model::ParamSet;
use crate::rng::{counter_uniform, gumbel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateOp {
    pub activation: Activation,
    pub dropout_p: f64,
    pub layer_norm: bool,
}

impl CandidateOp {
    pub fn label(&self) -> String {
        format!(
            "{}/p{}{}",
            self.activation.name(),
            self.dropout_p,
            if self.layer_norm { "/ln" } else { "" }
        )
    }
}

const CATALOG: [(Activation, f64); 12] = [
    (Activation::Relu, 0.1),
    (Activation::Tanh, 0.3),
    (Activation::LeakyRelu, 0.5),
    (Activation::Gelu, 0.1),
    (Activation::Relu, 0.3),
    (Activation::Gelu, 0.5),
    (Activation::Tanh, 0.1),
    (Activation::LeakyRelu, 0.1),
    (Activation::Tanh, 0.5),
    (Activation::LeakyRelu, 0.3),
    (Activation::Relu, 0.5),
    (Activation::Gelu, 0.3),
];

/// The first `k` entries of the activation × dropout catalog. Any `k ≥ 6`
/// covers all four activations and all three dropout rates; odd positions
/// carry a layer norm.
pub fn default_catalog(k: usize) -> Result<Vec<CandidateOp>, PrefixError> {
    if !(2..=CATALOG.len()).contains(&k) {
        return Err(PrefixError::Config(format!(
            "ops_per_layer must lie in [2, {}], got {k}",
            CATALOG.len()
        )));
    }
    Ok(CATALOG[..k]
        .iter()
        .enumerate()
        .map(|(i, &(activation, dropout_p))| CandidateOp {
            activation,
            dropout_p,
            layer_norm: i % 2 == 1,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub n_layers: usize,
    pub ops_per_layer: usize,
    /// Times the whole mixed stack is applied (shared weights and α).
    pub block_repetition: usize,
    pub allow_skip: bool,
    pub allow_reduction: bool,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            n_layers: 6,
            ops_per_layer: 6,
            block_repetition: 1,
            allow_skip: false,
            allow_reduction: false,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), PrefixError> {
        if self.n_layers == 0 {
            return Err(PrefixError::Config("n_layers must be at least 1".into()));
        }
        if self.block_repetition == 0 {
            return Err(PrefixError::Config("block_repetition must be at least 1".into()));
        }
        if self.allow_skip || self.allow_reduction {
            return Err(PrefixError::Config(
                "skip connections and reduction cells are not part of the search space".into(),
            ));
        }
        default_catalog(self.ops_per_layer).map(|_| ())
    }

    pub fn catalog(&self) -> Result<Vec<CandidateOp>, PrefixError> {
        default_catalog(self.ops_per_layer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// α rows are unconstrained logits; mixture weights are their softmax.
    Softmax,
    /// α rows live on the probability simplex and are the weights directly.
    Simplex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Softmax,
    Gumbel,
    Ste,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Softmax, Strategy::Gumbel, Strategy::Ste];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Softmax => "softmax",
            Strategy::Gumbel => "gumbel",
            Strategy::Ste => "ste",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = PrefixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PrefixError::Parameter(format!("unknown strategy {s:?}; expected softmax, gumbel or ste")))
    }
}

/// Architecture parameters α: one row per generator layer. Rows may have
/// different lengths after pruning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub rows: Vec<Tensor>,
    pub parameterization: Parameterization,
}

impl ArchParams {
    pub fn uniform(n_layers: usize, k: usize, parameterization: Parameterization) -> Self {
        let fill = match parameterization {
            Parameterization::Softmax => 0.0,
            Parameterization::Simplex => 1.0 / k as f64,
        };
        ArchParams {
            rows: vec![Tensor::full(&[k], fill); n_layers],
            parameterization,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, parameterization: Parameterization) -> Result<Self, PrefixError> {
        if rows.iter().any(Vec::is_empty) {
            return Err(PrefixError::Parameter("architecture rows must be nonempty".into()));
        }
        Ok(ArchParams {
            rows: rows.into_iter().map(Tensor::vector).collect(),
            parameterization,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.rows.len()
    }

    /// Mixture probabilities per layer under the softmax relaxation (or the
    /// simplex rows themselves).
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| match self.parameterization {
                Parameterization::Softmax => softmax(r.data()),
                Parameterization::Simplex => r.data().to_vec(),
            })
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.leaf_vars(g, trainable)
    }

    /// All α entries in layer order.
    pub fn flat(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|r| r.data().iter().copied()).collect()
    }
}

impl ParamSet for ArchParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        self.rows.iter().enumerate().map(|(i, r)| (format!("alpha.layer{i}"), r)).collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.rows.iter_mut().enumerate().map(|(i, r)| (format!("alpha.layer{i}"), r)).collect()
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Standard Gumbel noise for one α row, replayable from `key`.
pub fn gumbel_noise(key: u64, k: usize) -> Vec<f64> {
    (0..k as u64).map(|j| gumbel(counter_uniform(key, j))).collect()
}

fn check_temperature(strategy: Strategy, temperature: f64) -> Result<(), PrefixError> {
    if strategy == Strategy::Gumbel && !(temperature > 0.0 && temperature.is_finite()) {
        return Err(PrefixError::Parameter(format!(
            "gumbel temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// Relaxed mixture weights for one α row of logits. `noise_key` seeds the
/// Gumbel draw and is ignored by the other strategies.
pub fn mixture_weights(
    alpha_row: &[f64],
    strategy: Strategy,
    temperature: f64,
    noise_key: u64,
) -> Result<Vec<f64>, PrefixError> {
    if alpha_row.len() < 2 {
        return Err(PrefixError::Parameter(format!(
            "mixture needs at least 2 candidates, got {}",
            alpha_row.len()
        )));
    }
    check_temperature(strategy, temperature)?;
    Ok(match strategy {
        Strategy::Softmax => softmax(alpha_row),
        Strategy::Gumbel => {
            let noise = gumbel_noise(noise_key, alpha_row.len());
            let z: Vec<f64> = alpha_row.iter().zip(&noise).map(|(a, n)| (a + n) / temperature).collect();
            softmax(&z)
        }
        Strategy::Ste => {
            let mut w = vec![0.0; alpha_row.len()];
            w[argmax(alpha_row)] = 1.0;
            w
        }
    })
}

/// Differentiable mixture weights for one bound α row. `noise` must hold
/// one Gumbel draw per candidate when `strategy` is Gumbel.
pub fn mixture_weight_var(
    g: &mut Graph,
    row: Var,
    parameterization: Parameterization,
    strategy: Strategy,
    temperature: f64,
    noise: &[f64],
) -> Result<Var, PrefixError> {
    check_temperature(strategy, temperature)?;
    match (parameterization, strategy) {
        (Parameterization::Simplex, Strategy::Softmax) => Ok(row),
        (Parameterization::Simplex, s) => Err(PrefixError::Parameter(format!(
            "strategy {} needs softmax-parameterized α",
            s.name()
        ))),
        (Parameterization::Softmax, Strategy::Softmax) => Ok(g.softmax(row)?),
        (Parameterization::Softmax, Strategy::Ste) => Ok(g.straight_through(row)?),
        (Parameterization::Softmax, Strategy::Gumbel) => {
            let k = g.value(row).numel();
            if noise.len() != k {
                return Err(PrefixError::Parameter(format!("{} noise draws for {k} candidates", noise.len())));
            }
            let n = g.constant_owned(Tensor::vector(noise.to_vec()));
            let z = g.add(row, n)?;
            let z = g.scale(z, 1.0 / temperature)?;
            Ok(g.softmax(z)?)
        }
    }
}

/// `Σ_layers −Σ_j p_j ln p_j` of the per-layer mixture distribution.
pub fn entropy_regularizer(alpha: &ArchParams) -> f64 {
    alpha
        .probabilities()
        .iter()
        .map(|p| -p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>())
        .sum()
}

/// Graph form of [`entropy_regularizer`] over bound α rows.
pub fn entropy_var(g: &mut Graph, rows: &[Var], parameterization: Parameterization) -> Result<Var, PrefixError> {
    let mut total: Option<Var> = None;
    for &r in rows {
        let p = match parameterization {
            Parameterization::Softmax => g.softmax(r)?,
            Parameterization::Simplex => r,
        };
        let h = g.entropy(p)?;
        total = Some(match total {
            Some(t) => g.add(t, h)?,
            None => h,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant_owned(Tensor::scalar(0.0))),
    }
}

/// Argmax op index per layer (lowest index on ties).
pub fn discretize(alpha: &ArchParams) -> Vec<usize> {
    alpha.rows.iter().map(|r| argmax(r.data())).collect()
}

/// `‖α − onehot(argmax α)‖₁ = 2(1 − max p)` per layer, on probabilities.
pub fn l1_discretization_distance(alpha: &ArchParams) -> Vec<f64> {
    alpha
        .probabilities()
        .iter()
        .map(|p| {
            let j = argmax(p);
            p.iter()
                .enumerate()
                .map(|(i, &v)| if i == j { (1.0 - v).abs() } else { v.abs() })
                .sum()
        })
        .collect()
}

/// Euclidean distance between relaxed probabilities and their one-hot
/// discretization, over all layers.
pub fn l2_discretization_distance(alpha: &ArchParams) -> f64 {
    alpha
        .probabilities()
        .iter()
        .map(|p| {
            let j = argmax(p);
            p.iter()
                .enumerate()
                .map(|(i, &v)| if i == j { (1.0 - v).powi(2) } else { v * v })
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Euclidean projection onto `{x ≥ 0, Σx = 1}` by the sorted-threshold
/// method.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // One compensated pass pins the sum to 1 beyond accumulated roundoff.
    let s: f64 = out.iter().sum();
    let support = out.iter().filter(|&&x| x > 0.0).count().max(1) as f64;
    let fix = (1.0 - s) / support;
    for x in out.iter_mut().filter(|x| **x > 0.0) {
        *x = (*x + fix).max(0.0);
    }
    out
}

/// Surviving op indices per layer after [`prune_weak`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneOutcome {
    pub kept: Vec<Vec<usize>>,
}

impl PruneOutcome {
    pub fn removed_any(&self, before: &[usize]) -> bool {
        self.kept.iter().zip(before).any(|(k, &n)| k.len() != n)
    }
}

/// Removes candidates whose mixture probability is below `threshold`,
/// never the argmax. Softmax rows drop columns (the remaining logits
/// renormalize implicitly); simplex rows are projected after the drop.
pub fn prune_weak(alpha: &mut ArchParams, threshold: f64) -> Result<PruneOutcome, PrefixError> {
    let probs = alpha.probabilities();
    for p in &probs {
        let k = p.len();
        if k >= 2 && !(threshold > 0.0 && threshold < 1.0 / k as f64) {
            return Err(PrefixError::Parameter(format!(
                "prune threshold {threshold} must lie in (0, 1/{k})"
            )));
        }
    }
    let mut kept = Vec::with_capacity(probs.len());
    for (row, p) in alpha.rows.iter_mut().zip(&probs) {
        let best = argmax(p);
        let keep: Vec<usize> = (0..p.len()).filter(|&j| j == best || p[j] >= threshold).collect();
        let values: Vec<f64> = keep.iter().map(|&j| row.data()[j]).collect();
        let values = match alpha.parameterization {
            Parameterization::Softmax => values,
            Parameterization::Simplex => project_simplex(&values),
        };
        *row = Tensor::vector(values);
        kept.push(keep);
    }
    Ok(PruneOutcome { kept })
}

/// Per-layer record of the discovered architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub layer: usize,
    pub op_id: usize,
    pub activation: Activation,
    pub dropout_p: f64,
    pub layer_norm: bool,
    /// Mixture probabilities over the layer's surviving candidates.
    pub probabilities: Vec<f64>,
    /// Catalog ids of those candidates.
    pub candidates: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureExport {
    pub parameterization: Parameterization,
    pub block_repetition: usize,
    pub layers: Vec<LayerChoice>,
}

pub fn export_architecture(gen: &PrefixGenerator, alpha: &ArchParams) -> Result<ArchitectureExport, PrefixError> {
    gen.check_alpha(alpha)?;
    let choice = discretize(alpha);
    let layers = gen
        .layers
        .iter()
        .zip(alpha.probabilities())
        .zip(&choice)
        .enumerate()
        .map(|(i, ((layer, probabilities), &j))| {
            let op = &layer.ops[j];
            LayerChoice {
                layer: i,
                op_id: op.id,
                activation: op.op.activation,
                dropout_p: op.op.dropout_p,
                layer_norm: op.op.layer_norm,
                probabilities,
                candidates: layer.ops.iter().map(|o| o.id).collect(),
            }
        })
        .collect();
    Ok(ArchitectureExport {
        parameterization: alpha.parameterization,
        block_repetition: gen.block_repetition,
        layers,
    })
}

#[derive(Debug, Error)]
pub enum PrefixError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("state error: {0}")]
    State(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[cfg(test)]
mod tests;
