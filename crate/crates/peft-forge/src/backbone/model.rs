//! Model construction and the forward pass.
//!
//! The transformer is post-layer-norm (residual add, then norm). Every
//! sublayer output passes through its insertion-point hook before the
//! residual add; the hook is identity unless a PEFT module claims the point.

use super::{enumerate_insertion_points, InsertionPoint, ModelConfig, Side, Slot};
use crate::error::{Error, Result};
use crate::numerics::{DType, Element, GradTape, ParamGroup, Parameter, Tensor, ValueId};
use crate::rng::{derive_seed, Rng};
use crate::sharing::{AttnProj, ParamRegistry, ParamSpec};

pub const LN_EPS: f64 = 1e-5;

/// PEFT attachment surface consumed by the forward pass. Default methods are
/// all identity, so `NoPeft` runs the frozen backbone unchanged.
pub trait PeftHooks<E: Element> {
    /// Soft-prompt rows prepended to the encoder input, if any.
    fn encoder_prefix(
        &mut self,
        _tape: &mut GradTape<E>,
        _reg: &ParamRegistry,
        _task_idx: usize,
    ) -> Result<Option<ValueId>> {
        Ok(None)
    }

    /// Transform a sublayer output before the residual add.
    fn sublayer_hook(
        &mut self,
        _tape: &mut GradTape<E>,
        _reg: &ParamRegistry,
        _point: InsertionPoint,
        x: ValueId,
        _task_idx: usize,
    ) -> Result<ValueId> {
        Ok(x)
    }

    /// Adjust the output of one attention projection. `x_in` is the
    /// projection input, `base` is x_in * W + b with the frozen weight.
    fn attn_adjust(
        &mut self,
        _tape: &mut GradTape<E>,
        _reg: &ParamRegistry,
        _x_in: ValueId,
        base: ValueId,
        _point: InsertionPoint,
        _proj: AttnProj,
        _task_idx: usize,
    ) -> Result<ValueId> {
        Ok(base)
    }
}

/// The frozen backbone with no PEFT attachment.
pub struct NoPeft;

impl<E: Element> PeftHooks<E> for NoPeft {}

/// Encoder-decoder transformer. Parameters live in a [`ParamRegistry`]; the
/// model itself is just the configuration plus its insertion-point table.
/// The output head is the token embedding used transposed, so the tied-head
/// invariant holds by construction.
#[derive(Debug, Clone)]
pub struct EncoderDecoderModel {
    pub cfg: ModelConfig,
    points: Vec<InsertionPoint>,
}

impl EncoderDecoderModel {
    /// Shape layout of every backbone parameter, as a pure function of the
    /// config. `build` materializes it; the audit counts it.
    pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let d = cfg.d_model;
        let mut specs = Vec::new();

        fn attn(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push(ParamSpec::new(format!("{prefix}/{w}"), vec![d, d], ParamGroup::Backbone));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                specs.push(ParamSpec::new(format!("{prefix}/{b}"), vec![d], ParamGroup::Backbone));
            }
        }

        fn ff(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize, d_ff: usize) {
            specs.push(ParamSpec::new(format!("{prefix}/w1"), vec![d, d_ff], ParamGroup::Backbone));
            specs.push(ParamSpec::new(format!("{prefix}/b1"), vec![d_ff], ParamGroup::Backbone));
            specs.push(ParamSpec::new(format!("{prefix}/w2"), vec![d_ff, d], ParamGroup::Backbone));
            specs.push(ParamSpec::new(format!("{prefix}/b2"), vec![d], ParamGroup::Backbone));
        }

        fn norm(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
            specs.push(ParamSpec::new(format!("{prefix}/gain"), vec![d], ParamGroup::LayerNorm));
            specs.push(ParamSpec::new(format!("{prefix}/bias"), vec![d], ParamGroup::LayerNorm));
        }

        specs.push(ParamSpec::new("embedding/token", vec![cfg.vocab_size, d], ParamGroup::Embedding));
        specs.push(ParamSpec::new("embedding/enc_pos", vec![cfg.max_positions, d], ParamGroup::Embedding));
        specs.push(ParamSpec::new("embedding/dec_pos", vec![cfg.max_positions, d], ParamGroup::Embedding));
        norm(&mut specs, "layer_norm/encoder/emb", d);
        norm(&mut specs, "layer_norm/decoder/emb", d);

        for i in 0..cfg.n_enc_layers {
            attn(&mut specs, &format!("backbone/encoder/{i}/self_attn"), d);
            ff(&mut specs, &format!("backbone/encoder/{i}/ff"), d, cfg.d_ff);
            norm(&mut specs, &format!("layer_norm/encoder/{i}/self_attn"), d);
            norm(&mut specs, &format!("layer_norm/encoder/{i}/ff"), d);
        }

        for i in 0..cfg.n_dec_layers {
            attn(&mut specs, &format!("backbone/decoder/{i}/self_attn"), d);
            attn(&mut specs, &format!("backbone/decoder/{i}/cross_attn"), d);
            ff(&mut specs, &format!("backbone/decoder/{i}/ff"), d, cfg.d_ff);
            norm(&mut specs, &format!("layer_norm/decoder/{i}/self_attn"), d);
            norm(&mut specs, &format!("layer_norm/decoder/{i}/cross_attn"), d);
            norm(&mut specs, &format!("layer_norm/decoder/{i}/ff"), d);
        }

        specs.push(ParamSpec::new(
            "visual_projection/weight",
            vec![cfg.d_visual, d],
            ParamGroup::VisualProjection,
        ));
        specs.push(ParamSpec::new("visual_projection/bias", vec![d], ParamGroup::VisualProjection));
        specs
    }

    /// Build the model: weights from a seeded Gaussian (std 0.02), biases
    /// zero, layer-norm gains one. Frozen/trainable flags follow the standard
    /// PEFT policy (backbone/embedding frozen; layer norms and the visual
    /// projection trainable) until `build_trainable_set` overrides them.
    pub fn build(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<(Self, ParamRegistry)> {
        cfg.validate()?;
        let mut rng = Rng::new(derive_seed(seed, "backbone"));
        let mut reg = ParamRegistry::new();
        for spec in Self::layout(cfg) {
            let is_gain = spec.key.ends_with("/gain");
            let is_bias = spec.shape.len() == 1 && !is_gain;
            let value = if is_gain {
                Tensor::full(spec.shape.clone(), 1.0, dtype)
            } else if is_bias {
                Tensor::zeros(spec.shape.clone(), dtype)
            } else {
                Tensor::gaussian(spec.shape.clone(), 0.02, &mut rng, dtype)
            };
            let trainable = matches!(
                spec.group,
                ParamGroup::LayerNorm | ParamGroup::VisualProjection
            );
            reg.insert(Parameter::new(spec.key, value, trainable, spec.group))?;
        }
        let model = EncoderDecoderModel { cfg: cfg.clone(), points: enumerate_insertion_points(cfg) };
        Ok((model, reg))
    }

    pub fn insertion_points(&self) -> &[InsertionPoint] {
        &self.points
    }

    pub fn point_index(&self, point: InsertionPoint) -> usize {
        super::point_index(&self.cfg, point)
    }

    fn param<E: Element>(
        &self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        key: &str,
    ) -> Result<ValueId> {
        tape.param(reg.get(key)?)
    }

    /// Affine projection of frozen visual features into the model width.
    /// Accepts any number of rows (pair tasks concatenate two feature grids).
    pub fn project_visual<E: Element>(
        &self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        features: &Tensor,
    ) -> Result<ValueId> {
        if features.rank() != 2 || features.shape()[1] != self.cfg.d_visual {
            return Err(Error::Dimension(format!(
                "visual features {:?}, expected [*, {}]",
                features.shape(),
                self.cfg.d_visual
            )));
        }
        let x = tape.constant(features);
        let w = self.param(tape, reg, "visual_projection/weight")?;
        let b = self.param(tape, reg, "visual_projection/bias")?;
        let proj = tape.matmul(x, w)?;
        tape.add_bias(proj, b)
    }

    /// Multi-head attention. `visible[r]` caps how many key positions row r
    /// of the query may attend to (causal masking for decoder self-attention).
    #[allow(clippy::too_many_arguments)]
    fn attention<E: Element, H: PeftHooks<E>>(
        &self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        hooks: &mut H,
        task_idx: usize,
        q_in: ValueId,
        kv_in: ValueId,
        visible: &[usize],
        side: Side,
        layer: usize,
        slot: Slot,
    ) -> Result<ValueId> {
        let name = match slot {
            Slot::AfterSelfAttention => "self_attn",
            Slot::AfterCrossAttention => "cross_attn",
            Slot::AfterFeedForward => unreachable!("attention slot"),
        };
        let prefix = format!("backbone/{}/{layer}/{name}", side.name());
        let point = InsertionPoint { side, layer, slot };

        let mut proj = |tape: &mut GradTape<E>, x: ValueId, p: AttnProj| -> Result<ValueId> {
            let w = self.param(tape, reg, &format!("{prefix}/w{}", p.short()))?;
            let b = self.param(tape, reg, &format!("{prefix}/b{}", p.short()))?;
            let y = tape.matmul(x, w)?;
            let base = tape.add_bias(y, b)?;
            hooks.attn_adjust(tape, reg, x, base, point, p, task_idx)
        };

        let q = proj(tape, q_in, AttnProj::Query)?;
        let k = proj(tape, kv_in, AttnProj::Key)?;
        let v = proj(tape, kv_in, AttnProj::Value)?;

        let heads = self.cfg.n_heads;
        let dh = self.cfg.d_model / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut ctx_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.col_slice(q, h * dh, dh)?;
            let kh = tape.col_slice(k, h * dh, dh)?;
            let vh = tape.col_slice(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, inv_sqrt)?;
            let probs = tape.softmax_rows(scaled, visible.to_vec())?;
            ctx_heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&ctx_heads)?;
        proj(tape, ctx, AttnProj::Output)
    }

    fn feed_forward<E: Element>(
        &self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        x: ValueId,
        side: Side,
        layer: usize,
    ) -> Result<ValueId> {
        let prefix = format!("backbone/{}/{layer}/ff", side.name());
        let w1 = self.param(tape, reg, &format!("{prefix}/w1"))?;
        let b1 = self.param(tape, reg, &format!("{prefix}/b1"))?;
        let w2 = self.param(tape, reg, &format!("{prefix}/w2"))?;
        let b2 = self.param(tape, reg, &format!("{prefix}/b2"))?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, w2)?;
        tape.add_bias(h, b2)
    }

    /// Hook, residual add, then post-layer-norm.
    #[allow(clippy::too_many_arguments)]
    fn close_sublayer<E: Element, H: PeftHooks<E>>(
        &self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        hooks: &mut H,
        task_idx: usize,
        point: InsertionPoint,
        residual: ValueId,
        sub_out: ValueId,
        ln_prefix: &str,
    ) -> Result<ValueId> {
        let hooked = hooks.sublayer_hook(tape, reg, point, sub_out, task_idx)?;
        let sum = tape.add(residual, hooked)?;
        let gain = self.param(tape, reg, &format!("{ln_prefix}/gain"))?;
        let bias = self.param(tape, reg, &format!("{ln_prefix}/bias"))?;
        tape.layer_norm(sum, gain, bias, LN_EPS)
    }

    /// Encoder: [soft prompts?] ++ projected visual ++ token embeddings, plus
    /// positional embeddings over the whole sequence, through all layers.
    pub fn encode<E: Element, H: PeftHooks<E>>(
        &self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        hooks: &mut H,
        task_idx: usize,
        visual: &Tensor,
        input_tokens: &[u32],
    ) -> Result<ValueId> {
        for &t in input_tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::Index(format!("input token {t} outside vocab")));
            }
        }
        let mut parts = Vec::new();
        if let Some(prefix) = hooks.encoder_prefix(tape, reg, task_idx)? {
            parts.push(prefix);
        }
        parts.push(self.project_visual(tape, reg, visual)?);
        let emb = self.param(tape, reg, "embedding/token")?;
        if !input_tokens.is_empty() {
            parts.push(tape.gather_rows(emb, input_tokens)?);
        }
        let seq = tape.concat_rows(&parts)?;
        let len = tape.shape(seq)[0];
        if len > self.cfg.max_positions {
            return Err(Error::Sequence(format!(
                "encoder sequence {len} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let pos_ids: Vec<u32> = (0..len as u32).collect();
        let pos_table = self.param(tape, reg, "embedding/enc_pos")?;
        let pos = tape.gather_rows(pos_table, &pos_ids)?;
        let x = tape.add(seq, pos)?;
        let gain = self.param(tape, reg, "layer_norm/encoder/emb/gain")?;
        let bias = self.param(tape, reg, "layer_norm/encoder/emb/bias")?;
        let mut x = tape.layer_norm(x, gain, bias, LN_EPS)?;

        let full = vec![len; len];
        for layer in 0..self.cfg.n_enc_layers {
            let sa = self.attention(
                tape, reg, hooks, task_idx, x, x, &full, Side::Encoder, layer,
                Slot::AfterSelfAttention,
            )?;
            x = self.close_sublayer(
                tape,
                reg,
                hooks,
                task_idx,
                InsertionPoint { side: Side::Encoder, layer, slot: Slot::AfterSelfAttention },
                x,
                sa,
                &format!("layer_norm/encoder/{layer}/self_attn"),
            )?;
            let ff = self.feed_forward(tape, reg, x, Side::Encoder, layer)?;
            x = self.close_sublayer(
                tape,
                reg,
                hooks,
                task_idx,
                InsertionPoint { side: Side::Encoder, layer, slot: Slot::AfterFeedForward },
                x,
                ff,
                &format!("layer_norm/encoder/{layer}/ff"),
            )?;
        }
        Ok(x)
    }

    /// Decoder over an explicit input token sequence (already shifted).
    /// Returns logits [len, vocab]; row i predicts the token after
    /// `dec_input[..=i]`.
    pub fn decode<E: Element, H: PeftHooks<E>>(
        &self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        hooks: &mut H,
        task_idx: usize,
        enc_out: ValueId,
        dec_input: &[u32],
    ) -> Result<ValueId> {
        if dec_input.is_empty() {
            return Err(Error::Sequence("decoder input is empty".into()));
        }
        if dec_input.len() > self.cfg.max_positions {
            return Err(Error::Sequence(format!(
                "decoder sequence {} exceeds max_positions {}",
                dec_input.len(),
                self.cfg.max_positions
            )));
        }
        for &t in dec_input {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::Index(format!("decoder token {t} outside vocab")));
            }
        }
        let emb = self.param(tape, reg, "embedding/token")?;
        let tok = tape.gather_rows(emb, dec_input)?;
        let len = dec_input.len();
        let pos_ids: Vec<u32> = (0..len as u32).collect();
        let pos_table = self.param(tape, reg, "embedding/dec_pos")?;
        let pos = tape.gather_rows(pos_table, &pos_ids)?;
        let x = tape.add(tok, pos)?;
        let gain = self.param(tape, reg, "layer_norm/decoder/emb/gain")?;
        let bias = self.param(tape, reg, "layer_norm/decoder/emb/bias")?;
        let mut x = tape.layer_norm(x, gain, bias, LN_EPS)?;

        let causal: Vec<usize> = (1..=len).collect();
        let enc_len = tape.shape(enc_out)[0];
        let cross_full = vec![enc_len; len];
        for layer in 0..self.cfg.n_dec_layers {
            let sa = self.attention(
                tape, reg, hooks, task_idx, x, x, &causal, Side::Decoder, layer,
                Slot::AfterSelfAttention,
            )?;
            x = self.close_sublayer(
                tape,
                reg,
                hooks,
                task_idx,
                InsertionPoint { side: Side::Decoder, layer, slot: Slot::AfterSelfAttention },
                x,
                sa,
                &format!("layer_norm/decoder/{layer}/self_attn"),
            )?;
            let ca = self.attention(
                tape, reg, hooks, task_idx, x, enc_out, &cross_full, Side::Decoder, layer,
                Slot::AfterCrossAttention,
            )?;
            x = self.close_sublayer(
                tape,
                reg,
                hooks,
                task_idx,
                InsertionPoint { side: Side::Decoder, layer, slot: Slot::AfterCrossAttention },
                x,
                ca,
                &format!("layer_norm/decoder/{layer}/cross_attn"),
            )?;
            let ff = self.feed_forward(tape, reg, x, Side::Decoder, layer)?;
            x = self.close_sublayer(
                tape,
                reg,
                hooks,
                task_idx,
                InsertionPoint { side: Side::Decoder, layer, slot: Slot::AfterFeedForward },
                x,
                ff,
                &format!("layer_norm/decoder/{layer}/ff"),
            )?;
        }
        // Tied output head: logits = x * embedding^T.
        tape.matmul_nt(x, emb)
    }

    /// Teacher-forced forward pass: the decoder consumes BOS ++ targets[..-1]
    /// and the logits align with `target_tokens` row for row.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<E: Element, H: PeftHooks<E>>(
        &self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        hooks: &mut H,
        task_idx: usize,
        visual: &Tensor,
        input_tokens: &[u32],
        target_tokens: &[u32],
    ) -> Result<ValueId> {
        if target_tokens.is_empty() {
            return Err(Error::Sequence("target sequence is empty".into()));
        }
        let enc = self.encode(tape, reg, hooks, task_idx, visual, input_tokens)?;
        let mut dec_input = Vec::with_capacity(target_tokens.len());
        dec_input.push(self.cfg.bos_token);
        dec_input.extend_from_slice(&target_tokens[..target_tokens.len() - 1]);
        self.decode(tape, reg, hooks, task_idx, enc, &dec_input)
    }
}

/// Greedy argmax decoding until the end token or `max_len`. Deterministic:
/// ties resolve to the lowest token id.
pub fn generate_greedy<E: Element, H: PeftHooks<E>>(
    model: &EncoderDecoderModel,
    reg: &ParamRegistry,
    hooks: &mut H,
    task_idx: usize,
    visual: &Tensor,
    input_tokens: &[u32],
    max_len: usize,
) -> Result<Vec<u32>> {
    if max_len == 0 {
        return Err(Error::Config("generate_greedy: max_len must be at least 1".into()));
    }
    let mut tape = GradTape::<E>::new();
    let enc = model.encode(&mut tape, reg, hooks, task_idx, visual, input_tokens)?;
    let mut out: Vec<u32> = Vec::new();
    for _ in 0..max_len {
        let mut dec_input = Vec::with_capacity(out.len() + 1);
        dec_input.push(model.cfg.bos_token);
        dec_input.extend_from_slice(&out);
        let logits = model.decode(&mut tape, reg, hooks, task_idx, enc, &dec_input)?;
        let t = tape.value(logits);
        let vocab = model.cfg.vocab_size;
        let last = dec_input.len() - 1;
        let mut best = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for j in 0..vocab {
            let v = t.get(last * vocab + j);
            if v > best_val {
                best_val = v;
                best = j;
            }
        }
        if best as u32 == model.cfg.eos_token {
            break;
        }
        out.push(best as u32);
    }
    Ok(out)
}
