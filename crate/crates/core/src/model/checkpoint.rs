use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BaseWeights, LoraAdapters, ModelError, PrefixKV};
use crate::autodiff::{Mode, Tensor};
use crate::prefixnas::{ArchParams, PrefixGenerator, RelaxContext};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing JSON container for a trained (or in-progress) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub base_checksum: String,
    pub base: BaseWeights,
    pub adapters: LoraAdapters,
    pub generator: PrefixGenerator,
    pub alpha: ArchParams,
    /// True when `adapters` have been folded into `base`.
    pub merged: bool,
}

impl Checkpoint {
    pub fn new(
        base: BaseWeights,
        adapters: LoraAdapters,
        generator: PrefixGenerator,
        alpha: ArchParams,
        merged: bool,
    ) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            base_checksum: base.checksum(),
            base,
            adapters,
            generator,
            alpha,
            merged,
        }
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        serde_json::to_string(self).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        ck.base.config.validate()?;
        let sum = ck.base.checksum();
        if sum != ck.base_checksum {
            return Err(ModelError::Checkpoint(format!(
                "base checksum mismatch: recorded {}, computed {sum}",
                ck.base_checksum
            )));
        }
        ck.adapters.check(&ck.base.config)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let s = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&s)
    }
}

/// Base with adapters folded in, plus the retained single-path generator.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedModel {
    pub base: BaseWeights,
    pub generator: PrefixGenerator,
    pub alpha: ArchParams,
}

impl MergedModel {
    pub fn prefix(&self) -> Result<PrefixKV, ModelError> {
        self.generator
            .prefix(None, &RelaxContext::default(), Mode::Eval)
            .map_err(|e| ModelError::State(e.to_string()))
    }

    pub fn logits(&self, tokens: &[Vec<usize>], task: usize) -> Result<Tensor, ModelError> {
        let prefix = self.prefix()?;
        self.base.logits(None, Some(&prefix), tokens, task)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.base.clone(),
            LoraAdapters::default(),
            self.generator.clone(),
            self.alpha.clone(),
            true,
        )
    }
}

/// Folds `θ + scale·B·Aᵀ` into the base. The generator must already run
/// single-path.
pub fn merge_and_export(
    base: &BaseWeights,
    adapters: &LoraAdapters,
    generator: &PrefixGenerator,
    alpha: &ArchParams,
) -> Result<MergedModel, ModelError> {
    if !generator.is_discretized() {
        return Err(ModelError::State(
            "architecture is not discretized; finish the search before merging".into(),
        ));
    }
    Ok(MergedModel {
        base: adapters.merge_into(base)?,
        generator: generator.clone(),
        alpha: alpha.clone(),
    })
}
