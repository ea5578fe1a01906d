//! Named model parameters.

use super::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Accounting group a parameter belongs to. Groups drive the frozen/trainable
/// policy and the parameter audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    LayerNorm,
    VisualProjection,
    Peft,
    OutputHead,
    Embedding,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::LayerNorm => "layer_norm",
            ParamGroup::VisualProjection => "visual_projection",
            ParamGroup::Peft => "peft",
            ParamGroup::OutputHead => "output_head",
            ParamGroup::Embedding => "embedding",
        }
    }

    pub fn all() -> [ParamGroup; 6] {
        [
            ParamGroup::Backbone,
            ParamGroup::LayerNorm,
            ParamGroup::VisualProjection,
            ParamGroup::Peft,
            ParamGroup::OutputHead,
            ParamGroup::Embedding,
        ]
    }
}

/// A named tensor with a trainable flag. Parameters live in a
/// [`crate::sharing::ParamRegistry`]; the key is unique within a registry.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub key: String,
    pub value: Tensor,
    pub trainable: bool,
    pub group: ParamGroup,
}

impl Parameter {
    pub fn new(key: impl Into<String>, value: Tensor, trainable: bool, group: ParamGroup) -> Self {
        Parameter { key: key.into(), value, trainable, group }
    }
}
