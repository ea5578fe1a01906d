//! Checkpoint container: config echo plus every parameter keyed by registry
//! key, with dtype and shape headers. JSON, versioned, round-trip stable
//! (serde_json emits shortest round-trip decimals, so f32/f64 values survive
//! save/load bit-exactly).

use std::path::Path;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{DType, ParamGroup, Parameter, Tensor};
use crate::sharing::ParamRegistry;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointParam {
    pub key: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Opaque metadata slot; the experiment runner stores its resolved config
    /// here so a checkpoint is self-describing.
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<CheckpointParam>,
}

impl Checkpoint {
    pub fn from_registry(model: &ModelConfig, meta: serde_json::Value, reg: &ParamRegistry) -> Self {
        let params = reg
            .iter()
            .map(|(_, p)| CheckpointParam {
                key: p.key.clone(),
                group: p.group,
                trainable: p.trainable,
                dtype: p.value.dtype(),
                shape: p.value.shape().to_vec(),
                data: p.value.to_f64_vec(),
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: model.clone(),
            meta,
            params,
        }
    }

    /// Restore parameter values into a registry built from the same configs.
    /// Key set and shapes must match exactly.
    pub fn apply_to_registry(&self, reg: &mut ParamRegistry) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        if self.params.len() != reg.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                reg.len()
            )));
        }
        for cp in &self.params {
            let param = reg
                .get_mut(&cp.key)
                .map_err(|_| Error::Checkpoint(format!("unexpected key {}", cp.key)))?;
            if param.value.shape() != &cp.shape[..] {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} in checkpoint, {:?} in model",
                    cp.key,
                    cp.shape,
                    param.value.shape()
                )));
            }
            let value = Tensor::from_f64(cp.shape.clone(), cp.data.clone(), cp.dtype)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", cp.key)))?;
            *param = Parameter::new(cp.key.clone(), value, cp.trainable, cp.group);
        }
        Ok(())
    }
}

impl Checkpoint {
    /// Warm-start: copy values for every key present in both the checkpoint
    /// and the registry (shapes must match). Keys only on one side are left
    /// alone, so a pretrained backbone can seed a run that adds its own PEFT
    /// parameters. Every backbone-family key in the registry must be covered.
    pub fn warm_start(&self, reg: &mut ParamRegistry) -> Result<usize> {
        let mut loaded = 0;
        let mut covered: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
        for cp in &self.params {
            let Ok(param) = reg.get_mut(&cp.key) else { continue };
            if param.value.shape() != &cp.shape[..] {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} in checkpoint, {:?} in model",
                    cp.key,
                    cp.shape,
                    param.value.shape()
                )));
            }
            param.value = Tensor::from_f64(cp.shape.clone(), cp.data.clone(), param.value.dtype())
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", cp.key)))?;
            covered.insert(cp.key.as_str());
            loaded += 1;
        }
        for (key, p) in reg.iter() {
            let must_cover = matches!(
                p.group,
                ParamGroup::Backbone
                    | ParamGroup::Embedding
                    | ParamGroup::LayerNorm
                    | ParamGroup::VisualProjection
                    | ParamGroup::OutputHead
            );
            if must_cover && !covered.contains(key.as_str()) {
                return Err(Error::Checkpoint(format!(
                    "init checkpoint does not cover backbone parameter {key}"
                )));
            }
        }
        Ok(loaded)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string(checkpoint)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let cp: Checkpoint = serde_json::from_str(&raw)?;
    Ok(cp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderDecoderModel;

    fn desk_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_ff: 24,
            vocab_size: 20,
            max_positions: 32,
            d_visual: 8,
            n_visual_tokens: 2,
            bos_token: 1,
            eos_token: 2,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = desk_config();
        let (_, reg) = EncoderDecoderModel::build(&cfg, 42, DType::F32).unwrap();
        let cp = Checkpoint::from_registry(&cfg, serde_json::Value::Null, &reg);

        let dir = std::env::temp_dir().join("peft_forge_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt.json");
        save_checkpoint(&path, &cp).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let (_, mut reg2) = EncoderDecoderModel::build(&cfg, 0, DType::F32).unwrap();
        loaded.apply_to_registry(&mut reg2).unwrap();
        for (k, p) in reg.iter() {
            assert!(p.value.bitwise_eq(&reg2.get(k).unwrap().value), "{k}");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let cfg = desk_config();
        let (_, reg) = EncoderDecoderModel::build(&cfg, 42, DType::F32).unwrap();
        let cp = Checkpoint::from_registry(&cfg, serde_json::Value::Null, &reg);

        let mut other = desk_config();
        other.d_ff = 16;
        let (_, mut reg2) = EncoderDecoderModel::build(&other, 0, DType::F32).unwrap();
        assert!(matches!(
            cp.apply_to_registry(&mut reg2),
            Err(Error::Checkpoint(_))
        ));
    }
}
