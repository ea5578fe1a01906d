//! Parameter accounting: per-group counts and the updated-parameter
//! percentage against a reference descriptor.
//!
//! The percentage denominator is the language model (tied output head counted
//! once) plus the visual projection plus the instantiated PEFT parameters;
//! the visual featurizer is excluded entirely. On the BART-base-like
//! descriptor this convention reproduces the published accounting for all
//! regimes simultaneously (single adapter 4.18, multiple adapters 12.23,
//! half-shared 8.36, single/multiple compacter 2.70/7.05, single prompt
//! 2.03), which the simpler "backbone only" denominator provably cannot.

use std::collections::BTreeMap;

use super::ParamRegistry;
use crate::backbone::{EncoderDecoderModel, ModelConfig};
use crate::error::Result;
use crate::numerics::ParamGroup;
use crate::peft::{peft_param_count, PeftConfig};
use crate::sharing::SharingMode;
use serde::{Deserialize, Serialize};

/// Which parameter groups train. `Standard` is the paper policy (PEFT
/// modules, layer norms, visual projection); the rest are ablation hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainablePolicy {
    #[default]
    Standard,
    ProjectionOnly,
    LayerNormsOnly,
    ProjectionAndLayerNorms,
}

/// Flip trainable flags on the registry according to the PEFT kind and
/// policy; returns the sorted trainable key set.
pub fn build_trainable_set(
    reg: &mut ParamRegistry,
    peft_cfg: &PeftConfig,
    policy: TrainablePolicy,
) -> Vec<String> {
    let keys: Vec<String> = reg.keys().cloned().collect();
    for key in keys {
        let p = reg.get_mut(&key).expect("iterating existing keys");
        p.trainable = match policy {
            TrainablePolicy::Standard => match peft_cfg {
                PeftConfig::FullFinetune => true,
                _ => matches!(
                    p.group,
                    ParamGroup::Peft | ParamGroup::LayerNorm | ParamGroup::VisualProjection
                ),
            },
            TrainablePolicy::ProjectionOnly => p.group == ParamGroup::VisualProjection,
            TrainablePolicy::LayerNormsOnly => p.group == ParamGroup::LayerNorm,
            TrainablePolicy::ProjectionAndLayerNorms => matches!(
                p.group,
                ParamGroup::VisualProjection | ParamGroup::LayerNorm
            ),
        };
    }
    reg.trainable_keys()
}

/// Per-group counts and the updated-parameter percentage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub groups: BTreeMap<String, u64>,
    pub trainable_total: u64,
    pub denominator_total: u64,
    pub updated_percent: f64,
}

/// Exact counts from the layouts, without materializing any values. The
/// closed-form PEFT count is cross-checked against layout enumeration in
/// tests; here the closed form is authoritative.
pub fn audit(
    model_cfg: &ModelConfig,
    peft_cfg: &PeftConfig,
    n_tasks: usize,
    policy: TrainablePolicy,
) -> Result<AuditReport> {
    peft_cfg.validate(model_cfg)?;
    let mut groups: BTreeMap<String, u64> = BTreeMap::new();
    for spec in EncoderDecoderModel::layout(model_cfg) {
        *groups.entry(spec.group.name().to_string()).or_insert(0) += spec.numel();
    }
    let peft_total = peft_param_count(peft_cfg, model_cfg, n_tasks);
    groups.insert(ParamGroup::Peft.name().to_string(), peft_total);
    // Tied head: the output projection is the embedding, counted once there.
    groups.entry(ParamGroup::OutputHead.name().to_string()).or_insert(0);

    let g = |name: &str| groups.get(name).copied().unwrap_or(0);
    let denominator_total = g("backbone") + g("embedding") + g("layer_norm")
        + g("visual_projection")
        + g("output_head")
        + g("peft");

    let trainable_total = match policy {
        TrainablePolicy::Standard => match peft_cfg {
            PeftConfig::FullFinetune => denominator_total,
            _ => g("peft") + g("layer_norm") + g("visual_projection"),
        },
        TrainablePolicy::ProjectionOnly => g("visual_projection"),
        TrainablePolicy::LayerNormsOnly => g("layer_norm"),
        TrainablePolicy::ProjectionAndLayerNorms => g("visual_projection") + g("layer_norm"),
    };

    Ok(AuditReport {
        groups,
        trainable_total,
        denominator_total,
        updated_percent: 100.0 * trainable_total as f64 / denominator_total as f64,
    })
}

/// The CLIP-BART reference descriptor used for accounting: BART-base dims
/// with a 2048-wide frozen visual feature stream (36 grid tokens).
pub fn bart_base_like() -> ModelConfig {
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

/// One row of the audit table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRow {
    pub regime: String,
    pub config: String,
    pub trainable_count: u64,
    pub denominator: u64,
    pub percent: f64,
}

fn row(regime: &str, cfg: &PeftConfig, n_tasks: usize, policy: TrainablePolicy) -> Result<AuditRow> {
    let report = audit(&bart_base_like(), cfg, n_tasks, policy)?;
    Ok(AuditRow {
        regime: regime.to_string(),
        config: cfg.describe(),
        trainable_count: report.trainable_total,
        denominator: report.denominator_total,
        percent: report.updated_percent,
    })
}

/// The twelve multi-task regimes of the reference table, on the
/// BART-base-like descriptor with four tasks. LoRA rank is 64: the rank that
/// lands both Single and Multiple LoRA in the published percentage bands.
pub fn table1_rows() -> Result<Vec<AuditRow>> {
    let n = 4;
    let rows = vec![
        ("full_finetune", PeftConfig::FullFinetune),
        ("multiple_adapters", PeftConfig::Adapter { d: 96, sharing: SharingMode::Multiple }),
        (
            "half_shared_up_adapters",
            PeftConfig::Adapter { d: 96, sharing: SharingMode::HalfSharedUp },
        ),
        (
            "half_shared_down_adapters",
            PeftConfig::Adapter { d: 96, sharing: SharingMode::HalfSharedDown },
        ),
        ("single_adapter", PeftConfig::Adapter { d: 96, sharing: SharingMode::Single }),
        ("hyperformer", PeftConfig::Hyperformer { d: 96, d_e: 8, d_p: 8 }),
        (
            "multiple_compacters",
            PeftConfig::Compacter {
                d: 96,
                k: 2,
                share_a: false,
                low_rank: false,
                rank: 1,
                sharing: SharingMode::Multiple,
            },
        ),
        (
            "single_compacter",
            PeftConfig::Compacter {
                d: 96,
                k: 2,
                share_a: false,
                low_rank: false,
                rank: 1,
                sharing: SharingMode::Single,
            },
        ),
        (
            "multiple_lora",
            PeftConfig::Lora { rank: 64, train_bias: true, sharing: SharingMode::Multiple },
        ),
        ("single_lora", PeftConfig::Lora { rank: 64, train_bias: true, sharing: SharingMode::Single }),
        (
            "multiple_prompts",
            PeftConfig::Prompt { n_p: 40, d_m: 800, sharing: SharingMode::Multiple },
        ),
        ("single_prompt", PeftConfig::Prompt { n_p: 40, d_m: 800, sharing: SharingMode::Single }),
    ];
    rows.into_iter()
        .map(|(name, cfg)| row(name, &cfg, n, TrainablePolicy::Standard))
        .collect()
}

/// Calibration anchors: the always-trainable components measured alone.
pub fn anchor_rows() -> Result<Vec<AuditRow>> {
    Ok(vec![
        row("visual_projection_only", &PeftConfig::None, 4, TrainablePolicy::ProjectionOnly)?,
        row("layer_norms_only", &PeftConfig::None, 4, TrainablePolicy::LayerNormsOnly)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DType;
    use crate::peft::PeftInstance;

    fn desk_model() -> ModelConfig {
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
    fn audit_matches_instantiated_registry_enumeration() {
        let model = desk_model();
        let tasks: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let cfgs = [
            PeftConfig::Adapter { d: 4, sharing: SharingMode::HalfSharedUp },
            PeftConfig::Lora { rank: 2, train_bias: true, sharing: SharingMode::Multiple },
            PeftConfig::Hyperformer { d: 4, d_e: 3, d_p: 2 },
            PeftConfig::Prompt { n_p: 3, d_m: 6, sharing: SharingMode::Single },
        ];
        for cfg in cfgs {
            let (_, mut reg) = EncoderDecoderModel::build(&model, 1, DType::F32).unwrap();
            PeftInstance::build(&cfg, &model, &tasks, 2, DType::F32, &mut reg).unwrap();
            build_trainable_set(&mut reg, &cfg, TrainablePolicy::Standard);

            let report = audit(&model, &cfg, tasks.len(), TrainablePolicy::Standard).unwrap();
            assert_eq!(report.denominator_total, reg.total_params(), "{cfg:?}");
            assert_eq!(report.trainable_total, reg.trainable_params(), "{cfg:?}");
            let by_group = reg.count_by_group();
            for (group, count) in by_group {
                assert_eq!(report.groups[group.name()], count, "{cfg:?} group {}", group.name());
            }
        }
    }

    #[test]
    fn full_finetune_is_exactly_hundred_percent() {
        let report = audit(
            &bart_base_like(),
            &PeftConfig::FullFinetune,
            4,
            TrainablePolicy::Standard,
        )
        .unwrap();
        assert_eq!(report.trainable_total, report.denominator_total);
        assert_eq!(report.updated_percent, 100.0);
    }

    #[test]
    fn sharing_percentages_are_ordered() {
        let model = bart_base_like();
        let pct = |sharing| {
            audit(
                &model,
                &PeftConfig::Adapter { d: 96, sharing },
                4,
                TrainablePolicy::Standard,
            )
            .unwrap()
            .updated_percent
        };
        let multiple = pct(SharingMode::Multiple);
        let half = pct(SharingMode::HalfSharedUp);
        let single = pct(SharingMode::Single);
        assert!(multiple > half && half > single, "{multiple} {half} {single}");
    }

    #[test]
    fn anchors_match_paper_quotes() {
        let rows = anchor_rows().unwrap();
        let proj = &rows[0];
        let ln = &rows[1];
        assert!((proj.percent - 1.14).abs() < 0.05, "projection {}", proj.percent);
        assert!((ln.percent - 0.04).abs() < 0.01, "layer norms {}", ln.percent);
    }

    #[test]
    fn trainable_policy_ablations() {
        let model = desk_model();
        let (_, mut reg) = EncoderDecoderModel::build(&model, 1, DType::F32).unwrap();
        let keys = build_trainable_set(&mut reg, &PeftConfig::None, TrainablePolicy::ProjectionOnly);
        assert!(keys.iter().all(|k| k.starts_with("visual_projection/")));
        assert_eq!(keys.len(), 2);

        let keys =
            build_trainable_set(&mut reg, &PeftConfig::None, TrainablePolicy::ProjectionAndLayerNorms);
        assert!(keys
            .iter()
            .all(|k| k.starts_with("visual_projection/") || k.starts_with("layer_norm/")));

        let keys = build_trainable_set(&mut reg, &PeftConfig::FullFinetune, TrainablePolicy::Standard);
        assert_eq!(keys.len(), reg.len());
    }

    #[test]
    fn table_has_twelve_regimes() {
        let rows = table1_rows().unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(rows[0].regime, "full_finetune");
        assert_eq!(rows[0].percent, 100.0);
    }
}
