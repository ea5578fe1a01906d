//! Closed-form parameter counts for every PEFT kind.
//!
//! These formulas are the audit's fast path; tests pin them against
//! exhaustive enumeration of the instantiated layouts, exactly.

use super::PeftConfig;
use crate::backbone::{InsertionPoint, ModelConfig};
use crate::sharing::SharingMode;

/// Parameters of one adapter module: down [d_i, d] + bias + up [d, d_i] + bias.
pub fn adapter_module_count(d_i: usize, d: usize) -> u64 {
    (d_i * d + d + d * d_i + d_i) as u64
}

fn adapter_down_half(d_i: usize, d: usize) -> u64 {
    (d_i * d + d) as u64
}

fn adapter_up_half(d_i: usize, d: usize) -> u64 {
    (d * d_i + d_i) as u64
}

/// Compacter factor count for one bottleneck weight matrix, excluding the
/// A factors when they are shared globally.
pub fn phm_matrix_count(d_i: usize, d: usize, k: usize, low_rank: bool, rank: usize, share_a: bool) -> u64 {
    let a = if share_a { 0 } else { k * k * k };
    let b = if low_rank { rank * (d_i + d) } else { d_i * d / k };
    (a + b) as u64
}

fn compacter_module_count(d_i: usize, d: usize, k: usize, low_rank: bool, rank: usize, share_a: bool) -> u64 {
    // Down and up matrices plus the two bias vectors.
    2 * phm_matrix_count(d_i, d, k, low_rank, rank, share_a) + (d + d_i) as u64
}

fn compacter_down_half(d_i: usize, d: usize, k: usize, low_rank: bool, rank: usize, share_a: bool) -> u64 {
    phm_matrix_count(d_i, d, k, low_rank, rank, share_a) + d as u64
}

fn compacter_up_half(d_i: usize, d: usize, k: usize, low_rank: bool, rank: usize, share_a: bool) -> u64 {
    phm_matrix_count(d_i, d, k, low_rank, rank, share_a) + d_i as u64
}

/// Total hyperformer generator parameters: task embeddings, point embeddings,
/// the two-layer projector, and one output head per insertion-slot kind.
pub fn hyperformer_count(
    d_i: usize,
    d: usize,
    d_e: usize,
    d_p: usize,
    n_points: usize,
    n_tasks: usize,
) -> u64 {
    let embeddings = (n_tasks + n_points) * d_e;
    let projector = (2 * d_e * d_p + d_p) + (d_p * d_p + d_p);
    let head_width = 2 * d * d_i + d + d_i;
    let heads = InsertionPoint::N_SLOT_KINDS * (d_p * head_width + head_width);
    (embeddings + projector + heads) as u64
}

/// Prompt network: embedding [N_p, d_i] plus the two dense layers with biases.
pub fn prompt_count(d_i: usize, n_p: usize, d_m: usize) -> u64 {
    (n_p * d_i + d_i * d_m + d_m + d_m * d_i + d_i) as u64
}

/// LoRA parameters per task set: every attention sublayer (encoder self,
/// decoder self, decoder cross) times four projections.
fn lora_set_count(model: &ModelConfig, rank: usize, train_bias: bool) -> u64 {
    let n_attn = model.n_enc_layers + 2 * model.n_dec_layers;
    let d = model.d_model;
    let per_target = d * rank + rank * d + if train_bias { d } else { 0 };
    (n_attn * 4 * per_target) as u64
}

/// Closed-form count of all PEFT parameters a config instantiates.
pub fn peft_param_count(cfg: &PeftConfig, model: &ModelConfig, n_tasks: usize) -> u64 {
    let d_i = model.d_model;
    let points = model.n_insertion_points() as u64;
    let t = n_tasks as u64;
    match cfg {
        PeftConfig::None | PeftConfig::FullFinetune => 0,
        PeftConfig::Adapter { d, sharing } => {
            let per = adapter_module_count(d_i, *d);
            match sharing {
                SharingMode::Single => points * per,
                SharingMode::Multiple => t * points * per,
                SharingMode::HalfSharedUp => {
                    points * (adapter_up_half(d_i, *d) + t * adapter_down_half(d_i, *d))
                }
                SharingMode::HalfSharedDown => {
                    points * (adapter_down_half(d_i, *d) + t * adapter_up_half(d_i, *d))
                }
            }
        }
        PeftConfig::Compacter { d, k, share_a, low_rank, rank, sharing } => {
            let global_a = if *share_a { (k * k * k) as u64 } else { 0 };
            let per = compacter_module_count(d_i, *d, *k, *low_rank, *rank, *share_a);
            let down = compacter_down_half(d_i, *d, *k, *low_rank, *rank, *share_a);
            let up = compacter_up_half(d_i, *d, *k, *low_rank, *rank, *share_a);
            global_a
                + match sharing {
                    SharingMode::Single => points * per,
                    SharingMode::Multiple => t * points * per,
                    SharingMode::HalfSharedUp => points * (up + t * down),
                    SharingMode::HalfSharedDown => points * (down + t * up),
                }
        }
        PeftConfig::Hyperformer { d, d_e, d_p } => {
            hyperformer_count(d_i, *d, *d_e, *d_p, model.n_insertion_points(), n_tasks)
        }
        PeftConfig::Lora { rank, train_bias, sharing } => {
            let set = lora_set_count(model, *rank, *train_bias);
            match sharing {
                SharingMode::Single => set,
                SharingMode::Multiple => t * set,
                _ => unreachable!("validated"),
            }
        }
        PeftConfig::Prompt { n_p, d_m, sharing } => {
            let set = prompt_count(d_i, *n_p, *d_m);
            match sharing {
                SharingMode::Single => set,
                SharingMode::Multiple => t * set,
                _ => unreachable!("validated"),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bart_like() -> ModelConfig {
        ModelConfig {
            d_model: 768,
            n_enc_layers: 6,
            n_dec_layers: 6,
            n_heads: 12,
            d_ff: 3072,
            vocab_size: 50_265,
            max_positions: 1024,
            d_visual: 2048,
            n_visual_tokens: 36,
            bos_token: 1,
            eos_token: 2,
        }
    }

    #[test]
    fn adapter_module_count_matches_hand_sum() {
        // 768*96 + 96 + 96*768 + 768
        assert_eq!(adapter_module_count(768, 96), 148_320);
    }

    #[test]
    fn phm_dense_matrix_count_matches_hand_sum() {
        // 2*4 + 768*96/2
        assert_eq!(phm_matrix_count(768, 96, 2, false, 1, false), 36_872);
    }

    #[test]
    fn lphm_matrix_count_matches_hand_sum() {
        // 2*4 + 1*(768+96)
        assert_eq!(phm_matrix_count(768, 96, 2, true, 1, false), 872);
    }

    #[test]
    fn single_adapter_total_on_bart_like() {
        let model = bart_like();
        let got = peft_param_count(
            &PeftConfig::Adapter { d: 96, sharing: SharingMode::Single },
            &model,
            4,
        );
        assert_eq!(got, 30 * 148_320);
    }

    #[test]
    fn hyperformer_total_under_multiple_adapters_total() {
        let model = bart_like();
        let hyper = peft_param_count(&PeftConfig::Hyperformer { d: 96, d_e: 8, d_p: 8 }, &model, 4);
        let adapters = peft_param_count(
            &PeftConfig::Adapter { d: 96, sharing: SharingMode::Multiple },
            &model,
            4,
        );
        assert!(hyper < adapters, "{hyper} vs {adapters}");
    }

    #[test]
    fn prompt_count_matches_formula() {
        assert_eq!(
            prompt_count(768, 40, 800),
            40 * 768 + 768 * 800 + 800 + 800 * 768 + 768
        );
    }
}
