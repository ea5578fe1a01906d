//! The PEFT module zoo: bottleneck adapters, a weight-generating
//! hypernetwork, Kronecker-factored (PHM/LPHM) adapters, LoRA deltas, and a
//! soft-prompt network. Each kind exposes its forward mechanics, an exact
//! parameter-count formula, and a layout that the sharing audit enumerates.

pub mod adapter;
pub mod compacter;
pub mod counts;
pub mod hyperformer;
mod instance;
pub mod lora;
pub mod prompt;

pub use counts::peft_param_count;
pub use hyperformer::{check_hyperformer_budget, BudgetReport};
pub use instance::{GeneratedAdapter, Init, PeftInstance, PeftRuntime};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::sharing::SharingMode;
use serde::{Deserialize, Serialize};

fn default_rank() -> usize {
    1
}

fn default_lora_bias() -> bool {
    true
}

/// Tagged selection of one PEFT method with its hyperparameters. This is the
/// `peft` object of the experiment JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PeftConfig {
    /// Frozen backbone, no added modules; layer norms and the visual
    /// projection still train under the standard policy.
    None,
    /// Everything in the language model plus the projection trains.
    FullFinetune,
    Adapter {
        /// Bottleneck width.
        d: usize,
        #[serde(default)]
        sharing: SharingMode,
    },
    /// Adapter weights generated from task and insertion-point embeddings.
    /// Inherently shared across tasks; no sharing mode applies.
    Hyperformer {
        d: usize,
        d_e: usize,
        d_p: usize,
    },
    Compacter {
        d: usize,
        /// Number of Kronecker summands; must divide d_model and d.
        k: usize,
        #[serde(rename = "share_A", default)]
        share_a: bool,
        #[serde(default)]
        low_rank: bool,
        #[serde(default = "default_rank")]
        rank: usize,
        #[serde(default)]
        sharing: SharingMode,
    },
    Lora {
        rank: usize,
        /// Learn additive bias deltas next to the low-rank weight deltas.
        /// The host biases themselves stay frozen.
        #[serde(default = "default_lora_bias")]
        train_bias: bool,
        #[serde(default)]
        sharing: SharingMode,
    },
    Prompt {
        /// Prompt length.
        n_p: usize,
        /// Mid width of the two-layer prompt network.
        d_m: usize,
        #[serde(default)]
        sharing: SharingMode,
    },
}

impl PeftConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            PeftConfig::None => "none",
            PeftConfig::FullFinetune => "full_finetune",
            PeftConfig::Adapter { .. } => "adapter",
            PeftConfig::Hyperformer { .. } => "hyperformer",
            PeftConfig::Compacter { .. } => "compacter",
            PeftConfig::Lora { .. } => "lora",
            PeftConfig::Prompt { .. } => "prompt",
        }
    }

    pub fn sharing(&self) -> SharingMode {
        match self {
            PeftConfig::Adapter { sharing, .. }
            | PeftConfig::Compacter { sharing, .. }
            | PeftConfig::Lora { sharing, .. }
            | PeftConfig::Prompt { sharing, .. } => *sharing,
            _ => SharingMode::Single,
        }
    }

    pub fn validate(&self, model_cfg: &ModelConfig) -> Result<()> {
        match self {
            PeftConfig::None | PeftConfig::FullFinetune => Ok(()),
            PeftConfig::Adapter { d, .. } => {
                if *d == 0 {
                    return Err(Error::Config("adapter: d must be positive".into()));
                }
                Ok(())
            }
            PeftConfig::Hyperformer { d, d_e, d_p } => {
                if *d == 0 || *d_e == 0 || *d_p == 0 {
                    return Err(Error::Config("hyperformer: d, d_e, d_p must be positive".into()));
                }
                Ok(())
            }
            PeftConfig::Compacter { d, k, low_rank, rank, .. } => {
                if *d == 0 || *k == 0 {
                    return Err(Error::Config("compacter: d and k must be positive".into()));
                }
                if model_cfg.d_model % k != 0 || d % k != 0 {
                    return Err(Error::Config(format!(
                        "compacter: k={k} must divide both d_model={} and d={d}",
                        model_cfg.d_model
                    )));
                }
                if *low_rank && *rank == 0 {
                    return Err(Error::Config("compacter: rank must be positive".into()));
                }
                Ok(())
            }
            PeftConfig::Lora { rank, sharing, .. } => {
                if *rank == 0 {
                    return Err(Error::Config("lora: rank must be positive".into()));
                }
                match sharing {
                    SharingMode::Multiple | SharingMode::Single => Ok(()),
                    m => Err(Error::Config(format!(
                        "lora supports sharing modes multiple/single, got {}",
                        m.name()
                    ))),
                }
            }
            PeftConfig::Prompt { n_p, d_m, sharing } => {
                if *n_p == 0 || *d_m == 0 {
                    return Err(Error::Config("prompt: n_p and d_m must be positive".into()));
                }
                match sharing {
                    SharingMode::Multiple | SharingMode::Single => Ok(()),
                    m => Err(Error::Config(format!(
                        "prompt tuning supports sharing modes multiple/single, got {}",
                        m.name()
                    ))),
                }
            }
        }
    }

    /// Compact hyperparameter string for audit tables.
    pub fn describe(&self) -> String {
        match self {
            PeftConfig::None => "-".into(),
            PeftConfig::FullFinetune => "-".into(),
            PeftConfig::Adapter { d, .. } => format!("d={d}"),
            PeftConfig::Hyperformer { d, d_e, d_p } => format!("d={d} d_e={d_e} d_p={d_p}"),
            PeftConfig::Compacter { d, k, share_a, low_rank, rank, .. } => {
                let mut s = format!("d={d} k={k}");
                if *share_a {
                    s.push_str(" share_A");
                }
                if *low_rank {
                    s.push_str(&format!(" r={rank}"));
                }
                s
            }
            PeftConfig::Lora { rank, train_bias, .. } => {
                if *train_bias {
                    format!("r={rank} +bias")
                } else {
                    format!("r={rank}")
                }
            }
            PeftConfig::Prompt { n_p, d_m, .. } => format!("N_p={n_p} d_m={d_m}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelConfig {
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
    fn compacter_divisibility_is_checked() {
        let cfg = PeftConfig::Compacter {
            d: 6,
            k: 4, // 16 % 4 == 0 but 6 % 4 != 0
            share_a: false,
            low_rank: false,
            rank: 1,
            sharing: SharingMode::Single,
        };
        assert!(cfg.validate(&model()).is_err());
    }

    #[test]
    fn lora_rejects_half_shared_mode() {
        let cfg = PeftConfig::Lora { rank: 4, train_bias: true, sharing: SharingMode::HalfSharedUp };
        assert!(cfg.validate(&model()).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let json = r#"{"kind":"compacter","d":96,"k":2,"share_A":false,"low_rank":false,"sharing":"single"}"#;
        let cfg: PeftConfig = serde_json::from_str(json).unwrap();
        match &cfg {
            PeftConfig::Compacter { d, k, share_a, low_rank, rank, sharing } => {
                assert_eq!((*d, *k, *share_a, *low_rank, *rank), (96, 2, false, false, 1));
                assert_eq!(*sharing, SharingMode::Single);
            }
            other => panic!("parsed {other:?}"),
        }
        let back = serde_json::to_string(&cfg).unwrap();
        let again: PeftConfig = serde_json::from_str(&back).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let json = r#"{"kind":"adapter","d":96,"bogus":1}"#;
        assert!(serde_json::from_str::<PeftConfig>(json).is_err());
    }
}
