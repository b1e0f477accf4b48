use serde::{Deserialize, Serialize};

use super::{AdapterVars, BaseVars, BaseWeights, LoraAdapters, LoraTarget, ModelConfig, ModelError, Projection};
use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::rng::hash_words;

/// Per-block prefix keys and values, each `l × d_model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixKV {
    pub len: usize,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl PrefixKV {
    pub fn empty(n_blocks: usize, d_model: usize) -> Self {
        PrefixKV {
            len: 0,
            keys: vec![Tensor::zeros(&[0, d_model]); n_blocks],
            values: vec![Tensor::zeros(&[0, d_model]); n_blocks],
        }
    }

    pub fn bind(&self, g: &mut Graph) -> PrefixVars {
        PrefixVars {
            len: self.len,
            keys: self.keys.iter().map(|t| g.constant(t)).collect(),
            values: self.values.iter().map(|t| g.constant(t)).collect(),
        }
    }
}

/// Graph handles for a [`PrefixKV`].
#[derive(Clone, Debug)]
pub struct PrefixVars {
    pub len: usize,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Everything a forward pass reads besides the tokens.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars<'a> {
    pub base: &'a BaseVars,
    pub adapters: Option<&'a AdapterVars>,
    pub prefix: Option<&'a PrefixVars>,
}

fn dropout_site(task: usize, target: LoraTarget) -> u64 {
    hash_words(&[0x4c6f_5241, task as u64, target.block as u64, target.projection as u64])
}

fn project(
    g: &mut Graph,
    vars: &ModelVars,
    h: Var,
    target: LoraTarget,
    task: usize,
) -> Result<Var, ModelError> {
    let w = vars.base.projection(target.block, target.projection);
    let base = g.matmul_t(h, w)?;
    let Some(ad) = vars.adapters.and_then(|a| a.get(target)).copied() else {
        return Ok(base);
    };
    let hd = g.dropout(h, ad.dropout_p, dropout_site(task, target))?;
    let low = g.matmul(hd, ad.a)?;
    let up = g.matmul_t(low, ad.b)?;
    let up = g.scale(up, ad.scale)?;
    Ok(g.add(base, up)?)
}

fn attention_block(
    g: &mut Graph,
    config: &ModelConfig,
    vars: &ModelVars,
    block: usize,
    h: Var,
    batch: usize,
    seq: usize,
    task: usize,
) -> Result<Var, ModelError> {
    let t = |projection| LoraTarget { block, projection };
    let q = project(g, vars, h, t(Projection::Query), task)?;
    let k = project(g, vars, h, t(Projection::Key), task)?;
    let v = project(g, vars, h, t(Projection::Value), task)?;
    let prefix = vars
        .prefix
        .filter(|p| p.len > 0)
        .map(|p| (p.keys[block], p.values[block]));
    let a = g.attention(q, k, v, prefix, batch, seq, config.n_heads)?;
    project(g, vars, a, t(Projection::Output), task)
}

/// Logits (`batch × n_classes[task]`) for equal-length token sequences.
pub fn model_forward(
    g: &mut Graph,
    config: &ModelConfig,
    vars: &ModelVars,
    tokens: &[Vec<usize>],
    task: usize,
) -> Result<Var, ModelError> {
    if task >= config.n_tasks() {
        return Err(ModelError::Task {
            task,
            n_tasks: config.n_tasks(),
        });
    }
    let batch = tokens.len();
    let seq = tokens.first().map_or(0, Vec::len);
    if batch == 0 || seq == 0 {
        return Err(ModelError::Input("empty batch".into()));
    }
    if seq > config.max_seq {
        return Err(ModelError::Input(format!("sequence length {seq} exceeds max_seq {}", config.max_seq)));
    }
    if let Some(bad) = tokens.iter().find(|t| t.len() != seq) {
        return Err(ModelError::Input(format!(
            "ragged batch: lengths {seq} and {}",
            bad.len()
        )));
    }
    let ids: Vec<usize> = tokens.concat();
    if let Some(&bad) = ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::Input(format!("token {bad} outside vocabulary of {}", config.vocab_size)));
    }
    if let Some(p) = vars.prefix {
        if p.keys.len() != config.n_blocks || p.values.len() != config.n_blocks {
            return Err(ModelError::Input(format!(
                "prefix covers {} blocks, model has {}",
                p.keys.len(),
                config.n_blocks
            )));
        }
    }

    let base = vars.base;
    let emb = g.embedding(base.embedding, &ids)?;
    let pos = g.slice_rows(base.positions, 0, seq)?;
    let mut x = g.add_tiled(emb, pos)?;
    for (i, b) in base.blocks.iter().enumerate() {
        let h = g.layer_norm(x, b.ln1.0, b.ln1.1)?;
        let a = attention_block(g, config, vars, i, h, batch, seq, task)?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, b.ln2.0, b.ln2.1)?;
        let f = g.matmul_t(h, b.ff_in.0)?;
        let f = g.add_tiled(f, b.ff_in.1)?;
        let f = g.gelu(f)?;
        let f = g.matmul_t(f, b.ff_out.0)?;
        let f = g.add_tiled(f, b.ff_out.1)?;
        x = g.add(x, f)?;
    }
    let x = g.layer_norm(x, base.final_ln.0, base.final_ln.1)?;
    let pooled = g.mean_pool(x, seq)?;
    let (hw, hb) = base.heads[task];
    let logits = g.matmul_t(pooled, hw)?;
    Ok(g.add_tiled(logits, hb)?)
}

impl BaseWeights {
    /// Eval-mode logits with optional live adapters and prefix.
    pub fn logits(
        &self,
        adapters: Option<&LoraAdapters>,
        prefix: Option<&PrefixKV>,
        tokens: &[Vec<usize>],
        task: usize,
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::new(Mode::Eval);
        let base = self.bind(&mut g, false);
        let adapters = adapters.map(|a| a.bind(&mut g, false));
        let prefix = prefix.map(|p| p.bind(&mut g));
        let vars = ModelVars {
            base: &base,
            adapters: adapters.as_ref(),
            prefix: prefix.as_ref(),
        };
        let out = model_forward(&mut g, &self.config, &vars, tokens, task)?;
        Ok(g.value(out).clone())
    }
}

/// One block's attention sublayer (projections, heads, output projection) on
/// a single sequence `hidden` (`seq × d_model`), in eval mode. Returns the
/// output and the attention probabilities laid out `[head][query][l + seq]`.
pub fn attention_with_prefix(
    base: &BaseWeights,
    block: usize,
    hidden: &Tensor,
    prefix: Option<(&Tensor, &Tensor)>,
    adapters: &LoraAdapters,
) -> Result<(Tensor, Vec<f64>), ModelError> {
    let config = &base.config;
    if block >= config.n_blocks {
        return Err(ModelError::Config(format!("block {block} missing from base")));
    }
    adapters.check(config)?;
    let seq = hidden.rows();
    if seq > config.max_seq {
        return Err(ModelError::Input(format!("sequence length {seq} exceeds max_seq {}", config.max_seq)));
    }
    let mut g = Graph::new(Mode::Eval);
    let bv = base.bind(&mut g, false);
    let av = adapters.bind(&mut g, false);
    let h = g.constant(hidden);
    let t = |projection| LoraTarget { block, projection };
    let vars = ModelVars {
        base: &bv,
        adapters: Some(&av),
        prefix: None,
    };
    let q = project(&mut g, &vars, h, t(Projection::Query), 0)?;
    let k = project(&mut g, &vars, h, t(Projection::Key), 0)?;
    let v = project(&mut g, &vars, h, t(Projection::Value), 0)?;
    let pv = prefix.map(|(pk, pv)| (g.constant(pk), g.constant(pv)));
    let a = g.attention(q, k, v, pv, 1, seq, config.n_heads)?;
    let probs = g.attention_probs(a).map(<[f64]>::to_vec).unwrap_or_default();
    let out = project(&mut g, &vars, a, t(Projection::Output), 0)?;
    Ok((g.value(out).clone(), probs))
}
