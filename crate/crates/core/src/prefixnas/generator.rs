use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gumbel_noise, mixture_weight_var, ArchParams, CandidateOp, Parameterization, PrefixError, SearchSpace, Strategy};
use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::model::{ParamSet, PrefixKV, PrefixVars};
use crate::rng::hash_words;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpWeights {
    /// Catalog index; stable across pruning.
    pub id: usize,
    pub op: CandidateOp,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixLayer {
    pub ops: Vec<OpWeights>,
}

/// Supernet mapping the learnable embedding `P` (`l × d`) through the mixed
/// layers and an output linear to per-block prefix keys and values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixGenerator {
    pub d_model: usize,
    pub n_blocks: usize,
    pub prefix_len: usize,
    pub block_repetition: usize,
    pub embedding: Tensor,
    pub layers: Vec<PrefixLayer>,
    /// `2·n_blocks·d × d`; output columns `[2b·d, (2b+1)·d)` are block `b`'s
    /// keys, the next `d` its values.
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    /// Single-path op index per layer once discretized.
    pub selected: Option<Vec<usize>>,
}

impl PrefixGenerator {
    pub fn init<R: Rng + ?Sized>(
        space: &SearchSpace,
        d_model: usize,
        n_blocks: usize,
        prefix_len: usize,
        rng: &mut R,
    ) -> Result<Self, PrefixError> {
        space.validate()?;
        if d_model == 0 || n_blocks == 0 {
            return Err(PrefixError::Config("generator needs positive d_model and n_blocks".into()));
        }
        let catalog = space.catalog()?;
        let std = 1.0 / (d_model as f64).sqrt();
        let layers = (0..space.n_layers)
            .map(|_| PrefixLayer {
                ops: catalog
                    .iter()
                    .enumerate()
                    .map(|(id, &op)| OpWeights {
                        id,
                        op,
                        weight: Tensor::randn(&[d_model, d_model], std, rng),
                        bias: Tensor::zeros(&[d_model]),
                    })
                    .collect(),
            })
            .collect();
        Ok(PrefixGenerator {
            d_model,
            n_blocks,
            prefix_len,
            block_repetition: space.block_repetition,
            embedding: Tensor::randn(&[prefix_len, d_model], 1.0, rng),
            layers,
            out_weight: Tensor::randn(&[2 * n_blocks * d_model, d_model], std, rng),
            out_bias: Tensor::zeros(&[2 * n_blocks * d_model]),
            selected: None,
        })
    }

    pub fn op_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.ops.len()).collect()
    }

    pub fn is_discretized(&self) -> bool {
        self.selected.is_some()
    }

    pub fn check_alpha(&self, alpha: &ArchParams) -> Result<(), PrefixError> {
        let rows: Vec<usize> = alpha.rows.iter().map(Tensor::numel).collect();
        if rows != self.op_counts() {
            return Err(PrefixError::Parameter(format!(
                "α rows {rows:?} do not match generator layers {:?}",
                self.op_counts()
            )));
        }
        Ok(())
    }

    /// Keeps only the listed op positions per layer.
    pub fn retain_ops(&mut self, kept: &[Vec<usize>]) -> Result<(), PrefixError> {
        if kept.len() != self.layers.len() || self.selected.is_some() {
            return Err(PrefixError::State("pruning needs an undiscretized generator with matching layers".into()));
        }
        for (layer, keep) in self.layers.iter_mut().zip(kept) {
            if keep.is_empty() || keep.iter().any(|&j| j >= layer.ops.len()) {
                return Err(PrefixError::Parameter(format!("invalid kept set {keep:?}")));
            }
            layer.ops = keep.iter().map(|&j| layer.ops[j].clone()).collect();
        }
        Ok(())
    }

    /// Switches the generator to single-path mode with op `choice[i]` in
    /// layer `i`.
    pub fn fix_architecture(&mut self, choice: &[usize]) -> Result<(), PrefixError> {
        if choice.len() != self.layers.len() || choice.iter().zip(&self.layers).any(|(&c, l)| c >= l.ops.len()) {
            return Err(PrefixError::Parameter(format!(
                "choice {choice:?} does not fit layers {:?}",
                self.op_counts()
            )));
        }
        self.selected = Some(choice.to_vec());
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> GeneratorVars {
        let vars = self.leaf_vars(g, trainable);
        self.vars_from(&vars)
    }

    pub fn vars_from(&self, v: &[Var]) -> GeneratorVars {
        let mut it = v.iter().copied();
        let mut next = || it.next().expect("one var per generator tensor");
        let embedding = next();
        let layers = self
            .layers
            .iter()
            .map(|l| l.ops.iter().map(|_| (next(), next())).collect())
            .collect();
        let out = (next(), next());
        GeneratorVars {
            embedding,
            layers,
            out,
        }
    }

    /// Concrete prefix for the given α (ignored once discretized).
    pub fn prefix(&self, alpha: Option<&ArchParams>, ctx: &RelaxContext, mode: Mode) -> Result<PrefixKV, PrefixError> {
        let mut g = Graph::new(mode);
        let gv = self.bind(&mut g, false);
        let av = alpha.map(|a| ArchVars::bind(a, &mut g, false));
        let pv = generate_prefix(&mut g, self, &gv, av.as_ref(), ctx)?;
        Ok(PrefixKV {
            len: pv.len,
            keys: pv.keys.iter().map(|&k| g.value(k).clone()).collect(),
            values: pv.values.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }
}

impl ParamSet for PrefixGenerator {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("prefix.embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for op in &l.ops {
                out.push((format!("prefix.layer{i}.op{}.weight", op.id), &op.weight));
                out.push((format!("prefix.layer{i}.op{}.bias", op.id), &op.bias));
            }
        }
        out.push(("prefix.out.weight".into(), &self.out_weight));
        out.push(("prefix.out.bias".into(), &self.out_bias));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("prefix.embedding".to_string(), &mut self.embedding)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for op in &mut l.ops {
                out.push((format!("prefix.layer{i}.op{}.weight", op.id), &mut op.weight));
                out.push((format!("prefix.layer{i}.op{}.bias", op.id), &mut op.bias));
            }
        }
        out.push(("prefix.out.weight".into(), &mut self.out_weight));
        out.push(("prefix.out.bias".into(), &mut self.out_bias));
        out
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub embedding: Var,
    pub layers: Vec<Vec<(Var, Var)>>,
    pub out: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct ArchVars {
    pub rows: Vec<Var>,
    pub parameterization: Parameterization,
}

impl ArchVars {
    pub fn bind(alpha: &ArchParams, g: &mut Graph, trainable: bool) -> Self {
        ArchVars {
            rows: alpha.bind(g, trainable),
            parameterization: alpha.parameterization,
        }
    }
}

/// How mixture weights are formed for one generator evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelaxContext {
    pub strategy: Strategy,
    pub temperature: f64,
    /// Seeds the Gumbel draws; layer `i` uses `hash(noise_key, i)`.
    pub noise_key: u64,
}

impl Default for RelaxContext {
    fn default() -> Self {
        RelaxContext {
            strategy: Strategy::Softmax,
            temperature: 1.0,
            noise_key: 0,
        }
    }
}

impl RelaxContext {
    pub fn layer_noise(&self, layer: usize, k: usize) -> Vec<f64> {
        match self.strategy {
            Strategy::Gumbel => gumbel_noise(hash_words(&[self.noise_key, layer as u64]), k),
            _ => Vec::new(),
        }
    }
}

fn apply_op(
    g: &mut Graph,
    x: Var,
    op: &CandidateOp,
    (w, b): (Var, Var),
    norm: (Var, Var),
    site: u64,
) -> Result<Var, PrefixError> {
    let y = g.matmul_t(x, w)?;
    let y = g.add_tiled(y, b)?;
    let y = g.activation(y, op.activation)?;
    let y = g.dropout(y, op.dropout_p, site)?;
    if op.layer_norm {
        Ok(g.layer_norm(y, norm.0, norm.1)?)
    } else {
        Ok(y)
    }
}

/// `Σ_j weights_j · o_j(x)` over one layer's candidate ops.
pub fn mixed_layer_forward(
    g: &mut Graph,
    x: Var,
    ops: &[CandidateOp],
    op_vars: &[(Var, Var)],
    weights: Var,
    site_salt: u64,
) -> Result<Var, PrefixError> {
    let d = g.value(x).cols();
    let norm = (g.constant_owned(Tensor::full(&[d], 1.0)), g.constant_owned(Tensor::zeros(&[d])));
    let outs = ops
        .iter()
        .zip(op_vars)
        .enumerate()
        .map(|(j, (op, &wb))| apply_op(g, x, op, wb, norm, hash_words(&[site_salt, j as u64])))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(g.weighted_sum(&outs, weights)?)
}

/// Runs `P` through the generator. The result is the single prefix shared
/// by every task in a step. An undiscretized generator requires `arch`.
pub fn generate_prefix(
    g: &mut Graph,
    gen: &PrefixGenerator,
    vars: &GeneratorVars,
    arch: Option<&ArchVars>,
    ctx: &RelaxContext,
) -> Result<PrefixVars, PrefixError> {
    let d = gen.d_model;
    if gen.prefix_len == 0 {
        let empty = || Tensor::zeros(&[0, d]);
        return Ok(PrefixVars {
            len: 0,
            keys: (0..gen.n_blocks).map(|_| g.constant_owned(empty())).collect(),
            values: (0..gen.n_blocks).map(|_| g.constant_owned(empty())).collect(),
        });
    }
    let norm = (g.constant_owned(Tensor::full(&[d], 1.0)), g.constant_owned(Tensor::zeros(&[d])));
    let mut x = vars.embedding;
    match &gen.selected {
        Some(choice) => {
            for rep in 0..gen.block_repetition {
                for (i, (layer, &j)) in gen.layers.iter().zip(choice).enumerate() {
                    let op = &layer.ops[j];
                    let site = hash_words(&[rep as u64, i as u64, op.id as u64]);
                    x = apply_op(g, x, &op.op, vars.layers[i][j], norm, site)?;
                }
            }
        }
        None => {
            let arch = arch.ok_or_else(|| PrefixError::State("relaxed generator needs α".into()))?;
            if arch.rows.len() != gen.layers.len() {
                return Err(PrefixError::Parameter(format!(
                    "{} α rows for {} layers",
                    arch.rows.len(),
                    gen.layers.len()
                )));
            }
            let weights = arch
                .rows
                .iter()
                .zip(&gen.layers)
                .enumerate()
                .map(|(i, (&row, layer))| {
                    if g.value(row).numel() != layer.ops.len() {
                        return Err(PrefixError::Parameter(format!(
                            "α row {i} has {} entries for {} ops",
                            g.value(row).numel(),
                            layer.ops.len()
                        )));
                    }
                    let noise = ctx.layer_noise(i, layer.ops.len());
                    mixture_weight_var(g, row, arch.parameterization, ctx.strategy, ctx.temperature, &noise)
                })
                .collect::<Result<Vec<_>, _>>()?;
            for rep in 0..gen.block_repetition {
                for (i, layer) in gen.layers.iter().enumerate() {
                    let outs = layer
                        .ops
                        .iter()
                        .zip(&vars.layers[i])
                        .map(|(op, &wb)| {
                            let site = hash_words(&[rep as u64, i as u64, op.id as u64]);
                            apply_op(g, x, &op.op, wb, norm, site)
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    x = g.weighted_sum(&outs, weights[i])?;
                }
            }
        }
    }
    let y = g.matmul_t(x, vars.out.0)?;
    let y = g.add_tiled(y, vars.out.1)?;
    let mut keys = Vec::with_capacity(gen.n_blocks);
    let mut values = Vec::with_capacity(gen.n_blocks);
    for b in 0..gen.n_blocks {
        keys.push(g.slice_cols(y, 2 * b * d, d)?);
        values.push(g.slice_cols(y, (2 * b + 1) * d, d)?);
    }
    Ok(PrefixVars {
        len: gen.prefix_len,
        keys,
        values,
    })
}
