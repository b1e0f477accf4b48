use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, ParamSet, Projection};
use crate::autodiff::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
}

impl BlockWeights {
    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Query => &self.wq,
            Projection::Key => &self.wk,
            Projection::Value => &self.wv,
            Projection::Output => &self.wo,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Tensor {
        match p {
            Projection::Query => &mut self.wq,
            Projection::Key => &mut self.wk,
            Projection::Value => &mut self.wv,
            Projection::Output => &mut self.wo,
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("ff_in", &self.ff_in),
            ("ff_in_bias", &self.ff_in_bias),
            ("ff_out", &self.ff_out),
            ("ff_out_bias", &self.ff_out_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("ff_in", &mut self.ff_in),
            ("ff_in_bias", &mut self.ff_in_bias),
            ("ff_out", &mut self.ff_out),
            ("ff_out_bias", &mut self.ff_out_bias),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// The frozen parameters θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseWeights {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub positions: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub heads: Vec<HeadWeights>,
}

impl BaseWeights {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        let proj_std = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.n_blocks)
            .map(|_| BlockWeights {
                wq: Tensor::randn(&[d, d], proj_std, rng),
                wk: Tensor::randn(&[d, d], proj_std, rng),
                wv: Tensor::randn(&[d, d], proj_std, rng),
                wo: Tensor::randn(&[d, d], proj_std, rng),
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                ff_in: Tensor::randn(&[ff, d], proj_std, rng),
                ff_in_bias: Tensor::zeros(&[ff]),
                ff_out: Tensor::randn(&[d, ff], 1.0 / (ff as f64).sqrt(), rng),
                ff_out_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let heads = config
            .n_classes
            .iter()
            .map(|&c| HeadWeights {
                weight: Tensor::randn(&[c, d], proj_std, rng),
                bias: Tensor::zeros(&[c]),
            })
            .collect();
        Ok(BaseWeights {
            config: config.clone(),
            embedding: Tensor::randn(&[config.vocab_size, d], 1.0, rng),
            positions: Tensor::randn(&[config.max_seq, d], 0.5, rng),
            blocks,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            heads,
        })
    }

    /// SHA-256 over every tensor's name, shape and IEEE-754 bits, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BaseVars {
        let vars = self.leaf_vars(g, trainable);
        BaseVars::from_vars(&self.config, &vars)
    }
}

impl ParamSet for BaseWeights {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding), ("positions".to_string(), &self.positions)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.fields().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.weight"), &h.weight));
            out.push((format!("head{i}.bias"), &h.bias));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("embedding".to_string(), &mut self.embedding),
            ("positions".to_string(), &mut self.positions),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.fields_mut().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        out.push(("final_bias".into(), &mut self.final_bias));
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{i}.weight"), &mut h.weight));
            out.push((format!("head{i}.bias"), &mut h.bias));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub projections: [Var; 4],
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
    pub ff_in: (Var, Var),
    pub ff_out: (Var, Var),
}

/// Graph handles for [`BaseWeights`], in `named()` order.
#[derive(Clone, Debug)]
pub struct BaseVars {
    pub embedding: Var,
    pub positions: Var,
    pub blocks: Vec<BlockVars>,
    pub final_ln: (Var, Var),
    pub heads: Vec<(Var, Var)>,
}

impl BaseVars {
    pub fn from_vars(config: &ModelConfig, v: &[Var]) -> Self {
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let b = &v[2 + 12 * i..2 + 12 * (i + 1)];
                BlockVars {
                    projections: [b[0], b[1], b[2], b[3]],
                    ln1: (b[4], b[5]),
                    ln2: (b[6], b[7]),
                    ff_in: (b[8], b[9]),
                    ff_out: (b[10], b[11]),
                }
            })
            .collect();
        let rest = 2 + 12 * config.n_blocks;
        BaseVars {
            embedding: v[0],
            positions: v[1],
            blocks,
            final_ln: (v[rest], v[rest + 1]),
            heads: v[rest + 2..].chunks(2).map(|c| (c[0], c[1])).collect(),
        }
    }

    pub fn projection(&self, block: usize, p: Projection) -> Var {
        let idx = Projection::ALL.iter().position(|&q| q == p).unwrap_or(0);
        self.blocks[block].projections[idx]
    }
}
