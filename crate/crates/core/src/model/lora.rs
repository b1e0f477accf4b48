use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BaseWeights, LoraTarget, ModelConfig, ModelError, ParamSet, Projection};
use crate::autodiff::{Graph, Tensor, Var};

/// Which projections receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    KeyValue,
    All,
}

impl LoraTargets {
    pub fn projections(self) -> &'static [Projection] {
        match self {
            LoraTargets::KeyValue => &[Projection::Key, Projection::Value],
            LoraTargets::All => &Projection::ALL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub init_std: f64,
    pub targets: LoraTargets,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout_p: 0.0,
            init_std: 0.02,
            targets: LoraTargets::KeyValue,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, d_model: usize) -> Result<(), ModelError> {
        if self.rank == 0 || 2 * self.rank > d_model {
            return Err(ModelError::Config(format!(
                "lora rank {} must lie in [1, d_model/2 = {}]",
                self.rank,
                d_model / 2
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::Config(format!("lora alpha {} must be positive", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!("lora dropout {} outside [0, 1)", self.dropout_p)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(ModelError::Config(format!("lora init_std {} must be nonnegative", self.init_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: LoraTarget,
    /// `d_model × r`, zero at initialization.
    pub b: Tensor,
    /// `d_model × r`, `N(0, σ²)` at initialization.
    pub a: Tensor,
    pub rank: usize,
    pub scale: f64,
    pub dropout_p: f64,
}

impl LoraAdapter {
    /// `scale · B·Aᵀ`, the `d × d` update to the target weight.
    pub fn delta(&self) -> Tensor {
        let mut out = self.b.matmul(&self.a.transpose()).expect("adapter factors share rank");
        for v in out.data_mut() {
            *v *= self.scale;
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapters {
    pub adapters: Vec<LoraAdapter>,
}

impl LoraAdapters {
    pub fn init<R: Rng + ?Sized>(cfg: &LoraConfig, model: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate(model.d_model)?;
        let d = model.d_model;
        let mut adapters = Vec::new();
        for block in 0..model.n_blocks {
            for &projection in cfg.targets.projections() {
                adapters.push(LoraAdapter {
                    target: LoraTarget { block, projection },
                    b: Tensor::zeros(&[d, cfg.rank]),
                    a: Tensor::randn(&[d, cfg.rank], cfg.init_std, rng),
                    rank: cfg.rank,
                    scale: cfg.alpha / cfg.rank as f64,
                    dropout_p: cfg.dropout_p,
                });
            }
        }
        Ok(LoraAdapters { adapters })
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, target: LoraTarget) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    /// Checks every adapter against the base it will be applied to.
    pub fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        for ad in &self.adapters {
            if ad.target.block >= config.n_blocks {
                return Err(ModelError::Config(format!(
                    "adapter targets block {} but the model has {} blocks",
                    ad.target.block, config.n_blocks
                )));
            }
            let want = [config.d_model, ad.rank];
            if ad.a.shape() != want || ad.b.shape() != want {
                return Err(ModelError::Config(format!(
                    "adapter for block {} {} has shapes {:?}/{:?}, expected {want:?}",
                    ad.target.block,
                    ad.target.projection.name(),
                    ad.b.shape(),
                    ad.a.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AdapterVars {
        let vars = self.leaf_vars(g, trainable);
        self.vars_from(&vars)
    }

    pub fn vars_from(&self, vars: &[Var]) -> AdapterVars {
        AdapterVars {
            items: self
                .adapters
                .iter()
                .zip(vars.chunks(2))
                .map(|(ad, v)| AdapterVar {
                    target: ad.target,
                    a: v[0],
                    b: v[1],
                    scale: ad.scale,
                    dropout_p: ad.dropout_p,
                })
                .collect(),
        }
    }

    /// Returns `base` with every adapter folded in: `W + scale·B·Aᵀ`.
    pub fn merge_into(&self, base: &BaseWeights) -> Result<BaseWeights, ModelError> {
        self.check(&base.config)?;
        let mut merged = base.clone();
        for ad in &self.adapters {
            let w = merged.blocks[ad.target.block].projection_mut(ad.target.projection);
            for (wv, dv) in w.data_mut().iter_mut().zip(ad.delta().data()) {
                *wv += dv;
            }
        }
        Ok(merged)
    }
}

impl ParamSet for LoraAdapters {
    fn named(&self) -> Vec<(String, &Tensor)> {
        self.adapters
            .iter()
            .flat_map(|ad| {
                let stem = format!("lora.block{}.{}", ad.target.block, ad.target.projection.name());
                [(format!("{stem}.a"), &ad.a), (format!("{stem}.b"), &ad.b)]
            })
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.adapters
            .iter_mut()
            .flat_map(|ad| {
                let stem = format!("lora.block{}.{}", ad.target.block, ad.target.projection.name());
                [(format!("{stem}.a"), &mut ad.a), (format!("{stem}.b"), &mut ad.b)]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVar {
    pub target: LoraTarget,
    pub a: Var,
    pub b: Var,
    pub scale: f64,
    pub dropout_p: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AdapterVars {
    pub items: Vec<AdapterVar>,
}

impl AdapterVars {
    pub fn get(&self, target: LoraTarget) -> Option<&AdapterVar> {
        self.items.iter().find(|a| a.target == target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoraMode {
    /// `x·Wᵀ + scale·(x·A)·Bᵀ` through the factored path.
    Live,
    /// `x·(W + scale·B·Aᵀ)ᵀ` with the update materialized.
    Merged,
}

/// The adapted projection of rows `x` (eval mode, no dropout).
pub fn apply_lora(
    base: &BaseWeights,
    adapters: &LoraAdapters,
    target: LoraTarget,
    x: &Tensor,
    mode: LoraMode,
) -> Result<Tensor, ModelError> {
    let ad = adapters.get(target).ok_or_else(|| {
        ModelError::Config(format!(
            "no adapter for block {} {} projection",
            target.block,
            target.projection.name()
        ))
    })?;
    let block = base.blocks.get(target.block).ok_or_else(|| {
        ModelError::Config(format!("block {} missing from base", target.block))
    })?;
    let w = block.projection(target.projection);
    match mode {
        LoraMode::Live => {
            let mut out = x.matmul(&w.transpose())?;
            let low = x.matmul(&ad.a)?.matmul(&ad.b.transpose())?;
            for (o, l) in out.data_mut().iter_mut().zip(low.data()) {
                *o += ad.scale * l;
            }
            Ok(out)
        }
        LoraMode::Merged => {
            let mut merged = w.clone();
            for (m, dv) in merged.data_mut().iter_mut().zip(ad.delta().data()) {
                *m += dv;
            }
            Ok(x.matmul(&merged.transpose())?)
        }
    }
}
