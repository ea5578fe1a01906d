//! Desk-scale frozen encoder-decoder transformer with named PEFT insertion
//! points, a visual projection layer, and task-prompt input serialization.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{generate_greedy, EncoderDecoderModel, NoPeft, PeftHooks, LN_EPS};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Transformer dimensions. `d_visual`/`n_visual_tokens` describe the incoming
/// frozen visual features; the visual featurizer itself lives in `multitask`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub d_visual: usize,
    pub n_visual_tokens: usize,
    #[serde(default = "default_bos")]
    pub bos_token: u32,
    #[serde(default = "default_eos")]
    pub eos_token: u32,
}

fn default_bos() -> u32 {
    1
}

fn default_eos() -> u32 {
    2
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model and n_heads must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::Config("need at least one encoder and decoder layer".into()));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::Config("d_ff, vocab_size, max_positions must be positive".into()));
        }
        if self.d_visual == 0 || self.n_visual_tokens == 0 {
            return Err(Error::Config("d_visual and n_visual_tokens must be positive".into()));
        }
        if (self.bos_token as usize) >= self.vocab_size || (self.eos_token as usize) >= self.vocab_size {
            return Err(Error::Config("bos/eos token id outside vocab".into()));
        }
        Ok(())
    }

    /// Number of PEFT insertion points: two per encoder layer, three per
    /// decoder layer (cross-attention counts as an attention slot).
    pub fn n_insertion_points(&self) -> usize {
        2 * self.n_enc_layers + 3 * self.n_dec_layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    AfterSelfAttention,
    AfterCrossAttention,
    AfterFeedForward,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::AfterSelfAttention => "after_self_attention",
            Slot::AfterCrossAttention => "after_cross_attention",
            Slot::AfterFeedForward => "after_feed_forward",
        }
    }
}

/// A named location where a PEFT hook attaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct InsertionPoint {
    pub side: Side,
    pub layer: usize,
    pub slot: Slot,
}

impl InsertionPoint {
    pub fn new(side: Side, layer: usize, slot: Slot) -> Result<Self> {
        if side == Side::Encoder && slot == Slot::AfterCrossAttention {
            return Err(Error::Config(
                "after_cross_attention is only valid on the decoder side".into(),
            ));
        }
        Ok(InsertionPoint { side, layer, slot })
    }

    /// Index of the (side, slot) kind, used by the hypernetwork's per-slot
    /// output heads: encoder {self_attn, ff}, decoder {self_attn, cross, ff}.
    pub fn slot_kind(&self) -> usize {
        match (self.side, self.slot) {
            (Side::Encoder, Slot::AfterSelfAttention) => 0,
            (Side::Encoder, Slot::AfterFeedForward) => 1,
            (Side::Decoder, Slot::AfterSelfAttention) => 2,
            (Side::Decoder, Slot::AfterCrossAttention) => 3,
            (Side::Decoder, Slot::AfterFeedForward) => 4,
            (Side::Encoder, Slot::AfterCrossAttention) => unreachable!("checked at construction"),
        }
    }

    pub const N_SLOT_KINDS: usize = 5;
}

/// Index of a point in the `enumerate_insertion_points` order.
pub fn point_index(cfg: &ModelConfig, point: InsertionPoint) -> usize {
    match (point.side, point.slot) {
        (Side::Encoder, Slot::AfterSelfAttention) => 2 * point.layer,
        (Side::Encoder, Slot::AfterFeedForward) => 2 * point.layer + 1,
        (Side::Encoder, Slot::AfterCrossAttention) => unreachable!("checked at construction"),
        (Side::Decoder, slot) => {
            let offset = match slot {
                Slot::AfterSelfAttention => 0,
                Slot::AfterCrossAttention => 1,
                Slot::AfterFeedForward => 2,
            };
            2 * cfg.n_enc_layers + 3 * point.layer + offset
        }
    }
}

/// All insertion points of a model, in forward order: encoder layers first
/// (self-attention then feed-forward), then decoder layers (self-attention,
/// cross-attention, feed-forward).
pub fn enumerate_insertion_points(cfg: &ModelConfig) -> Vec<InsertionPoint> {
    let mut points = Vec::with_capacity(cfg.n_insertion_points());
    for layer in 0..cfg.n_enc_layers {
        points.push(InsertionPoint { side: Side::Encoder, layer, slot: Slot::AfterSelfAttention });
        points.push(InsertionPoint { side: Side::Encoder, layer, slot: Slot::AfterFeedForward });
    }
    for layer in 0..cfg.n_dec_layers {
        points.push(InsertionPoint { side: Side::Decoder, layer, slot: Slot::AfterSelfAttention });
        points.push(InsertionPoint { side: Side::Decoder, layer, slot: Slot::AfterCrossAttention });
        points.push(InsertionPoint { side: Side::Decoder, layer, slot: Slot::AfterFeedForward });
    }
    points
}

/// Prepend a task's prompt prefix (plus separator) to raw input tokens.
/// With `use_prompt` off the input passes through unchanged.
pub fn serialize_input(
    prefix_tokens: &[u32],
    sep_token: u32,
    raw_text: &[u32],
    use_prompt: bool,
) -> Vec<u32> {
    if !use_prompt {
        return raw_text.to_vec();
    }
    let mut out = Vec::with_capacity(prefix_tokens.len() + 1 + raw_text.len());
    out.extend_from_slice(prefix_tokens);
    out.push(sep_token);
    out.extend_from_slice(raw_text);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn desk_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 24,
            max_positions: 48,
            d_visual: 8,
            n_visual_tokens: 3,
            bos_token: 1,
            eos_token: 2,
        }
    }

    #[test]
    fn insertion_point_count_is_2enc_plus_3dec() {
        let cfg = desk_config();
        let points = enumerate_insertion_points(&cfg);
        assert_eq!(points.len(), 2 * 2 + 3 * 2);
        assert_eq!(points.len(), cfg.n_insertion_points());
    }

    #[test]
    fn encoder_cross_attention_is_rejected() {
        assert!(InsertionPoint::new(Side::Encoder, 0, Slot::AfterCrossAttention).is_err());
        assert!(InsertionPoint::new(Side::Decoder, 0, Slot::AfterCrossAttention).is_ok());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = desk_config();
        cfg.n_heads = 3; // 16 % 3 != 0
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn serialize_input_prepends_prefix_and_sep() {
        let out = serialize_input(&[10], 3, &[7, 8], true);
        assert_eq!(out, vec![10, 3, 7, 8]);
    }

    #[test]
    fn serialize_input_without_prompt_is_identity() {
        let out = serialize_input(&[10], 3, &[7, 8], false);
        assert_eq!(out, vec![7, 8]);
    }

    #[test]
    fn serialize_input_differs_only_in_prefix() {
        let a = serialize_input(&[10], 3, &[7, 8], true);
        let b = serialize_input(&[11], 3, &[7, 8], true);
        assert_eq!(a[1..], b[1..]);
        assert_ne!(a[0], b[0]);
    }

    #[test]
    fn slot_kinds_cover_five_values() {
        let cfg = desk_config();
        let kinds: std::collections::BTreeSet<usize> = enumerate_insertion_points(&cfg)
            .iter()
            .map(|p| p.slot_kind())
            .collect();
        assert_eq!(kinds.len(), InsertionPoint::N_SLOT_KINDS);
    }
}
